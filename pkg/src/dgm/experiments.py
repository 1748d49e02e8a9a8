"""Reference experiment presets on synthetic data.

These are the frozen settings behind the experiment-level checks in the test
suite and the ``crossval``/``synth`` CLI commands. The cluster data is used with
its graph modality in generator units (only the node modality is z-scored):
the scale of the graph features sets where the edge kernel starts, and a
tight-cluster regime is where a learned temperature has something to find.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import partial

import numpy as np

from .data import NodeDataset, PointCloudSet, make_splits, standardize, synth_clusters, synth_shapes
from .graph import make_rng
from .metrics import mean_iou
from .model import DGMModel, LayerSpec, ModelConfig
from .training import CVResult, cross_validate, evaluate, fit, predict_stochastic, run_inductive, train

CLUSTER_PARAMS = dict(N=300, classes=3, d_node=8, d_graph=2, separation=1.2, noise=0.1, node_signal=1.5)

node_only_standardize = partial(standardize, modalities=("modality1",))


def cluster_dataset(seed: int = 0) -> NodeDataset:
    return synth_clusters(seed=seed, **CLUSTER_PARAMS)


def cluster_config(mode: str = "dgm", seed: int = 0, **overrides) -> ModelConfig:
    """Two sparse (k=2) SGCN layers, graph branch on modality 2, node branch on
    modality 1, one reward product per layer. ``knn`` mode trains without the
    graph loss."""
    cfg = ModelConfig(
        layers=[LayerSpec(k=2, graph_width=16, node_width=32, f="mlp", g="sgcn") for _ in range(2)],
        graph_mode=mode,
        node_input="m1",
        graph_input="m2",
        lam=0.0 if mode == "knn" else 1.0,
        graph_loss_per_layer=True,
        seed=seed,
    )
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cluster_crossval(mode: str = "dgm", seed: int = 0, folds: int = 10, repeats: int = 8) -> CVResult:
    return cross_validate(cluster_config(mode, seed), cluster_dataset(seed), folds=folds, seed=seed,
                          repeats=repeats, preprocess=node_only_standardize)


def homophily_gain(result: CVResult, layer: int = 0) -> list[float]:
    """Per-fold change in sampled-graph homophily from the first to the last epoch."""
    return [h.records[-1].homophily[layer] - h.records[0].homophily[layer] for h in result.histories]


@dataclass
class InductiveComparison:
    transductive_accuracy: float
    inductive_accuracy: float

    @property
    def gap(self) -> float:
        return self.transductive_accuracy - self.inductive_accuracy


def cluster_inductive(seed: int = 0, repeats: int = 8) -> InductiveComparison:
    """Same held-out 10% scored twice: visible during training (transductive)
    and entirely absent from it (inductive, 80/10/10)."""
    ds = cluster_dataset(seed)
    cfg = cluster_config("dgm", seed)
    trans = node_only_standardize(ds.with_masks(**make_splits(ds, "transductive", seed)))
    model, _ = fit(cfg, trans)
    t_acc = evaluate(model, trans, trans.test, repeats).accuracy
    ind = node_only_standardize(ds.with_masks(**make_splits(ds, "inductive", seed)))
    res, _, _ = run_inductive(cfg, ind, repeats)
    return InductiveComparison(t_acc, res.accuracy)


def pointcloud_preset(seed: int = 0, **overrides) -> ModelConfig:
    """Full-size part-segmentation setting: EdgeConv on coordinates, k=20."""
    cfg = ModelConfig(layers=[LayerSpec(k=20, graph_width=16, node_width=64) for _ in range(2)],
                      graph_mode="dgm", node_input="m1", graph_input="m1", seed=seed)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def zero_shot_preset(seed: int = 0, **overrides) -> ModelConfig:
    """Vector-target setting: k=3 graphs, regression head."""
    cfg = ModelConfig(layers=[LayerSpec(k=3, graph_width=16, node_width=32) for _ in range(2)],
                      graph_mode="dgm", node_input="m1", graph_input="m1", task="regression", seed=seed)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


SHAPE_PARAMS = dict(points_per_shape=256, jitter=0.01)


def shape_config(seed: int = 0, **overrides) -> ModelConfig:
    cfg = ModelConfig(
        layers=[LayerSpec(k=10, graph_width=16, node_width=32) for _ in range(2)],
        graph_mode="dgm",
        node_input="m1",
        graph_input="m1",
        seed=seed,
    )
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


@dataclass
class SegmentationResult:
    miou: float
    per_shape: list[float]
    model: DGMModel


def segment_shapes(seed: int = 0, train_count: int = 6, test_count: int = 4,
                   repeats: int = 8, config: ModelConfig | None = None) -> SegmentationResult:
    """Train one model over a set of shapes (one graph per shape), then label
    fresh shapes by stochastic inference restricted to each category's parts."""
    cfg = config or shape_config(seed)
    train_set = synth_shapes(count=train_count, seed=seed, **SHAPE_PARAMS)
    test_set = synth_shapes(count=test_count, seed=seed + 1000, **SHAPE_PARAMS)
    train_ds = train_set.as_datasets(training=True)
    model = DGMModel.for_dataset(cfg, train_ds[0], num_outputs=train_set.part_count)
    train(model, train_ds, cfg)
    return _score_shapes(model, test_set, repeats, seed)


def _score_shapes(model: DGMModel, shapes: PointCloudSet, repeats: int, seed: int) -> SegmentationResult:
    rng = make_rng([seed, 3])
    preds, truths, parts = [], [], []
    for ds in shapes.as_datasets(training=False):
        allowed = shapes.part_sets[ds.category]
        pred, _ = predict_stochastic(model, ds, repeats, rng, allowed=allowed)
        preds.append(pred)
        truths.append(ds.labels)
        parts.append(allowed)
    per_shape = [mean_iou([p], [t], [s]) for p, t, s in zip(preds, truths, parts)]
    return SegmentationResult(float(np.mean(per_shape)), per_shape, model)
