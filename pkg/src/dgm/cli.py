"""Command-line entry point: ``dgm <command> ...``.

Exit codes: 0 success, 1 failed self-check, 2 configuration or input error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import zipfile
from dataclasses import replace
from pathlib import Path

import yaml

from . import experiments
from .data import DataError, NodeDataset, load_tabular, make_splits, standardize, synth_clusters, synth_shapes, write_shape, write_tabular
from .graph import ConfigError, make_rng
from .metrics import MetricsReport
from .model import CheckpointError, DGMModel, ModelConfig
from .training import NumericError, cross_validate, evaluate, evaluate_inductive, train

log = logging.getLogger("dgm")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DGM_SEED"

PREPROCESS = {
    "standardize": standardize,
    "node-only": experiments.node_only_standardize,
    "none": None,
}


class UsageError(Exception):
    pass


def _default_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _resolve_seed(args, fallback: int) -> int:
    if args.seed is not None:
        return args.seed
    env = _default_seed()
    return fallback if env is None else env


def _load_data(args) -> NodeDataset:
    schema = args.schema or Path(args.data).with_suffix(".schema")
    return load_tabular(args.data, schema)


def _prepare(ds: NodeDataset, scheme: str, seed: int, preprocess: str) -> NodeDataset:
    ds = ds.with_masks(**make_splits(ds, scheme, seed))
    fn = PREPROCESS[preprocess]
    return ds if fn is None else fn(ds)


def _emit(report: MetricsReport, path: str | None) -> None:
    if path:
        report.write(path)
    else:
        sys.stdout.write(report.to_json())


def cmd_train(args) -> int:
    cfg = ModelConfig.load(args.config)
    seed = _resolve_seed(args, cfg.seed)
    cfg = replace(cfg, seed=seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    cfg.validate()
    start = time.perf_counter()
    ds = _prepare(_load_data(args), args.split, seed, args.preprocess)
    fit_ds = ds.subset(~ds.unseen) if args.split == "inductive" else ds
    model = DGMModel.for_dataset(cfg, fit_ds)
    _, history = train(model, fit_ds, cfg)
    if args.split == "inductive":
        result = evaluate_inductive(model, ds, cfg.repeats)
    else:
        result = evaluate(model, ds, ds.test, cfg.repeats)
    last = history.records[-1] if history.records else None
    extra = {"split": args.split, "preprocess": args.preprocess, "epochs": cfg.epochs}
    if args.checkpoint:
        model.save(args.checkpoint, epoch=cfg.epochs, extra=extra)
    if args.history:
        Path(args.history).write_text(json.dumps(history.to_list(), sort_keys=True, indent=2) + "\n")
    report = MetricsReport(
        accuracy=result.accuracy,
        per_class_accuracy=result.per_class,
        homophily=last.homophily if last else [],
        losses={"task": last.task_loss, "graph": last.graph_loss} if last else {},
        config=cfg.to_dict(),
        seed=seed,
        wall_time=time.perf_counter() - start if args.wall_time else None,
        extra=extra,
    )
    _emit(report, args.report)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, manifest = DGMModel.load(args.checkpoint)
    cfg = model.config
    extra = manifest.get("extra", {})
    scheme = args.split or extra.get("split", "transductive")
    preprocess = extra.get("preprocess", "standardize")
    ds = _prepare(_load_data(args), scheme, cfg.seed, preprocess)
    rng = make_rng([_resolve_seed(args, cfg.seed), 2])
    if scheme == "inductive":
        result = evaluate_inductive(model, ds, args.repeats, rng)
    else:
        result = evaluate(model, ds, ds.test, args.repeats, rng)
    report = MetricsReport(
        accuracy=result.accuracy,
        per_class_accuracy=result.per_class,
        config=cfg.to_dict(),
        seed=cfg.seed,
        extra={"split": scheme, "repeats": args.repeats, "preprocess": preprocess},
    )
    _emit(report, args.report)
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = ModelConfig.load(args.config)
    seed = _resolve_seed(args, cfg.seed)
    cfg = replace(cfg, seed=seed)
    start = time.perf_counter()
    ds = _load_data(args)
    result = cross_validate(cfg, ds, folds=args.folds, seed=seed, repeats=cfg.repeats,
                            preprocess=PREPROCESS[args.preprocess])
    gains = [h.records[-1].homophily[0] - h.records[0].homophily[0]
             for h in result.histories if len(h) and h.records[0].homophily[0] is not None]
    report = MetricsReport(
        accuracy=result.mean,
        config=cfg.to_dict(),
        seed=seed,
        wall_time=time.perf_counter() - start if args.wall_time else None,
        extra={"std": result.std, "fold_scores": result.fold_scores, "folds": args.folds,
               "preprocess": args.preprocess, "layer1_homophily_gain": gains},
    )
    _emit(report, args.report)
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = _resolve_seed(args, 0)
    if args.kind == "clusters":
        params = dict(experiments.CLUSTER_PARAMS)
        for key in ("N", "classes", "d_node", "d_graph", "separation", "noise", "node_signal"):
            value = getattr(args, key)
            if value is not None:
                params[key] = value
        ds = synth_clusters(seed=seed, **params)
        out = Path(args.out)
        write_tabular(ds, out, out.with_suffix(".schema"))
        if args.config_out:
            cfg = experiments.cluster_config(args.mode, seed)
            Path(args.config_out).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
        print(f"wrote {ds.num_nodes} nodes to {out}", file=sys.stderr)
    else:
        shapes = synth_shapes(count=args.count, points_per_shape=args.points, seed=seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for n, shape in enumerate(shapes.shapes):
            write_shape(shape, out / f"{shapes.categories[shape.category]}_{n:03d}.txt")
        print(f"wrote {len(shapes.shapes)} shapes to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_export_graph(args) -> int:
    model, manifest = DGMModel.load(args.checkpoint)
    cfg = model.config
    extra = manifest.get("extra", {})
    ds = _prepare(_load_data(args), extra.get("split", "transductive"), cfg.seed,
                  extra.get("preprocess", "standardize"))
    rng = make_rng([_resolve_seed(args, cfg.seed), 4])
    out = model.forward(ds, rng)
    target = Path(args.out_dir)
    target.mkdir(parents=True, exist_ok=True)
    formats = ["edges", "dot"] if args.format == "both" else [args.format]
    for n, graph in enumerate(out.graphs, start=1):
        for fmt in formats:
            path = target / f"layer{n}.{'txt' if fmt == 'edges' else 'dot'}"
            graph.write(path, fmt)
            print(path)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import gradient_suite

    results = gradient_suite(tol=args.tol)
    for r in results:
        print(r.line())
    worst = max(r.value for r in results)
    print(f"max rel. error {worst:.3g}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_sample_test(args) -> int:
    from .verify import knn_collapse_check, sampling_frequency_check

    seed = _resolve_seed(args, 0)
    results = [sampling_frequency_check(draws=args.draws, seed=seed), knn_collapse_check(seed=seed)]
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgm", description="Learned latent graphs for graph convolution.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--data", required=True, help="CSV with a header row")
        p.add_argument("--schema", help="key=value column schema (default: DATA with .schema suffix)")

    def seed_arg(p):
        p.add_argument("--seed", type=int, help=f"overrides the config seed and ${SEED_ENV}")

    p = sub.add_parser("train", help="train on a tabular dataset, write checkpoint and report")
    p.add_argument("--config", required=True, help="JSON or YAML model config")
    data_args(p)
    seed_arg(p)
    p.add_argument("--split", choices=["transductive", "inductive"], default="transductive")
    p.add_argument("--preprocess", choices=sorted(PREPROCESS), default="standardize")
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", help="write the trained model here")
    p.add_argument("--report", help="metrics JSON (default: stdout)")
    p.add_argument("--history", help="per-epoch history JSON")
    p.add_argument("--wall-time", action="store_true", help="include wall time (breaks byte-identical reports)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    seed_arg(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--transductive", dest="split", action="store_const", const="transductive")
    mode.add_argument("--inductive", dest="split", action="store_const", const="inductive")
    p.add_argument("--repeats", type=int, default=8, help="stochastic passes averaged (default 8)")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--config", required=True)
    data_args(p)
    seed_arg(p)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--preprocess", choices=sorted(PREPROCESS), default="standardize")
    p.add_argument("--report")
    p.add_argument("--wall-time", action="store_true")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("kind", choices=["clusters", "shapes"])
    p.add_argument("--out", required=True, help="CSV path (clusters) or directory (shapes)")
    seed_arg(p)
    p.add_argument("--n", dest="N", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--d-node", type=int)
    p.add_argument("--d-graph", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--node-signal", type=float)
    p.add_argument("--config-out", help="also write the matching preset config (clusters)")
    p.add_argument("--mode", choices=["dgm", "mdgm", "knn"], default="dgm")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--points", type=int, default=2048)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-graph", help="write sampled graphs per layer")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    seed_arg(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=["edges", "dot", "both"], default="edges")
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sample-test", help="statistical checks of the edge sampler")
    seed_arg(p)
    p.add_argument("--draws", type=int, default=100_000)
    p.set_defaults(func=cmd_sample_test)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, CheckpointError, UsageError, KeyError, ValueError, OSError,
            yaml.YAMLError, zipfile.BadZipFile) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
