"""Self-checks shipped with the package: finite-difference gradients and
sampler statistics. Used by the ``gradcheck`` and ``sample-test`` commands."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import NodeDataset
from .graph import EdgeProbabilityMatrix, edge_probabilities, gumbel_top_k, knn_baseline, make_rng
from .layers import MLP, SGCN, EdgeConv
from .losses import cross_entropy, graph_loss
from .model import DGMModel, LayerSpec, ModelConfig, l2_normalize_rows
from .tensor import Tensor

GRAD_TOL = 1e-4
# toy-stack seed; with seed 0 one relu pre-activation sits 8e-7 from zero, inside
# the finite-difference step, so central differences straddle the kink
STACK_SEED = 1


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3g}{extra}"


def _param(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from(rng, shape, points=(0.0,), gap=0.2) -> Tensor:
    """Uniform values that keep at least ``gap`` from every kink in ``points``."""
    v = rng.uniform(-2.0, 2.0, shape)
    for p in points:
        d = v - p
        near = np.abs(d) < gap
        v[near] = p + np.where(d[near] >= 0, gap, -gap)
    return Tensor(v, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, w))


def toy_dataset(n: int = 6, seed: int = 0) -> NodeDataset:
    rng = make_rng(seed)
    labels = np.arange(n) % 2
    return NodeDataset(
        modality1=rng.standard_normal((n, 3)) + labels[:, None],
        modality2=rng.standard_normal((n, 2)) + labels[:, None],
        labels=labels, class_count=2, train=np.arange(n) < n - 1, test=np.arange(n) == n - 1,
    )


def toy_model(seed: int = 0, **overrides) -> DGMModel:
    cfg = ModelConfig(layers=[LayerSpec(k=2, graph_width=3, node_width=4) for _ in range(2)],
                      seed=seed, edge_hidden=4, **overrides)
    return DGMModel.for_dataset(cfg, toy_dataset(seed=seed))


def _stack_loss(model: DGMModel, ds: NodeDataset, seed: int) -> Callable[[], Tensor]:
    # the same noise on every call, and frozen reward weights, so the loss is a
    # smooth function of the parameters around the current point
    with T.no_grad():
        ref = model.forward(ds, make_rng(seed))
    pred = np.argmax(ref.logits.values, axis=1)

    def fn():
        out = model.forward(ds, make_rng(seed))
        g = graph_loss(pred, ds.labels, out.graphs, ds.train, ds.class_count)
        return T.add(cross_entropy(out.logits, ds.labels, ds.train), g)
    return fn


def gradient_cases(seed: int = 0, stack_seed: int = STACK_SEED) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, scalar function, parameters) for every differentiable op."""
    rng = make_rng([seed, 7])
    cases = []

    def add_case(name, fn, params):
        cases.append((name, fn, params))

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    row, col = _param(rng, 1, 4), _param(rng, 3, 1)
    w = rng.standard_normal((3, 4))
    add_case("add", lambda: _weighted(T.add(a, b), w), [a, b])
    add_case("add_broadcast", lambda: _weighted(T.add(a, row), w), [a, row])
    add_case("sub", lambda: _weighted(T.sub(a, col), w), [a, col])
    add_case("mul", lambda: _weighted(T.mul(a, b), w), [a, b])
    add_case("mul_broadcast", lambda: _weighted(T.mul(col, row), w), [col, row])
    add_case("negate", lambda: _weighted(T.negate(a), w), [a])
    add_case("exp", lambda: _weighted(T.exp(a), w), [a])
    pos = _param(rng, 3, 4, lo=0.5, hi=2.0)
    add_case("log", lambda: _weighted(T.log(pos), w), [pos])
    add_case("log_clamped", lambda: _weighted(T.log(pos, clamp=True), w), [pos])
    kinked = _away_from(rng, (3, 4))
    add_case("relu", lambda: _weighted(T.relu(kinked), w), [kinked])
    add_case("leaky_relu", lambda: _weighted(T.leaky_relu(kinked), w), [kinked])
    clamped = _away_from(rng, (3, 4), points=(-1.0, 1.0), gap=0.1)
    add_case("clamp", lambda: _weighted(T.clamp(clamped, -1.0, 1.0), w), [clamped])
    add_case("sum_axis", lambda: _weighted(T.sum(a, axis=1, keepdims=True), w[:, :1]), [a])
    add_case("mean", lambda: T.mul(T.mean(a), 3.0), [a])
    distinct = Tensor(rng.permutation(12).reshape(3, 4).astype(float) * 0.5, requires_grad=True)
    add_case("max_axis", lambda: _weighted(T.max(distinct, axis=0), w[0]), [distinct])
    c = _param(rng, 4, 2)
    add_case("matmul", lambda: _weighted(T.matmul(a, c), w[:, :2]), [a, c])
    x = _param(rng, 5, 3)
    wd = rng.standard_normal((5, 5))
    add_case("pairwise_sq_dist", lambda: _weighted(T.pairwise_sq_dist(x), wd), [x])
    add_case("concat", lambda: _weighted(T.concat(a, b), np.tile(w, 2)), [a, b])
    idx = np.array([2, 0, 2, 1])
    add_case("gather_rows", lambda: _weighted(T.gather_rows(a, idx), w[idx]), [a])
    add_case("gather_entries", lambda: _weighted(T.gather_entries(a, idx, np.array([0, 3, 3, 1])), w[0]), [a])
    add_case("segment_sum", lambda: _weighted(T.segment_sum(x, np.array([1, 0, 1, 2, 0]), 3), w[:, :3]), [x])
    add_case("reshape", lambda: _weighted(T.reshape(a, (4, 3)), w.reshape(4, 3)), [a])
    add_case("log_softmax", lambda: _weighted(T.log_softmax(a, axis=1), w), [a])
    add_case("l2_normalize_rows", lambda: _weighted(l2_normalize_rows(a), w), [a])

    xg = _param(rng, 5, 2)
    logt = Tensor(np.array(0.3), requires_grad=True)
    add_case("edge_probabilities",
             lambda: _weighted(edge_probabilities(xg, T.exp(logt)).probs, wd), [xg, logt])

    # layers on a fixed sampled graph
    feats = _param(rng, 6, 3)
    with T.no_grad():
        graph = gumbel_top_k(edge_probabilities(feats.values, 1.0), 2, make_rng([seed, 8]))
    layer_rng = make_rng([seed, 9])
    ec = EdgeConv(3, 4, layer_rng, hidden=5)
    sg = SGCN(3, 4, layer_rng)
    ml = MLP([3, 5, 4], layer_rng)
    w6 = rng.standard_normal((6, 4))
    add_case("edge_conv", lambda: _weighted(ec(feats, graph), w6),
             [feats] + list(ec.named_parameters().values()))
    add_case("sgcn_conv", lambda: _weighted(sg(feats, graph), w6),
             [feats] + list(sg.named_parameters().values()))
    add_case("mlp", lambda: _weighted(ml(feats), w6), [feats] + list(ml.named_parameters().values()))

    logits = _param(rng, 6, 3)
    labels = np.array([0, 1, 2, 0, 1, 2])
    add_case("cross_entropy", lambda: cross_entropy(logits, labels, labels >= 0), [logits])

    gx = _param(rng, 6, 2)

    def reward():
        P = edge_probabilities(gx, T.exp(logt))
        g = gumbel_top_k(P, 2, q=make_rng([seed, 10]).random((6, 5)) * 0.98 + 0.01)
        return graph_loss(np.array([0, 1, 1, 0, 2, 2]), labels, [g], None, 3)
    add_case("graph_loss", reward, [gx, logt])

    ds = toy_dataset(seed=stack_seed)
    model = toy_model(stack_seed)
    add_case("dgm_stack", _stack_loss(model, ds, stack_seed), list(model.parameters().values()))
    return cases


def gradient_suite(seed: int = 0, tol: float = GRAD_TOL) -> list[CheckResult]:
    out = []
    for name, fn, params in gradient_cases(seed):
        report = T.check_gradient(fn, params)
        err = report.max_rel_error
        out.append(CheckResult(f"grad {name}", err < tol, err, f"tol {tol:g}"))
    return out


def sampling_frequency_check(draws: int = 100_000, seed: int = 0, tol: float = 0.01,
                             p=(0.7, 0.2, 0.1)) -> CheckResult:
    """k=1 draws from one node's candidate set; empirical frequencies against
    the normalised probabilities."""
    m = len(p) + 1
    probs = np.full((m, m), 0.5)
    probs[0, 1:] = p
    P = EdgeProbabilityMatrix(Tensor(probs), Tensor(1.0), Tensor(np.log(probs)))
    rng = make_rng(seed)
    counts = np.zeros(m)
    start = time.perf_counter()
    for _ in range(draws):
        counts[gumbel_top_k(P, 1, rng).edges[0, 1]] += 1
    elapsed = time.perf_counter() - start
    freq = counts[1:] / draws
    expected = np.asarray(p) / np.sum(p)
    dev = float(np.max(np.abs(freq - expected)))
    detail = f"freq {np.round(freq, 4).tolist()} vs {np.round(expected, 4).tolist()}, {elapsed:.1f}s"
    return CheckResult("sampling frequencies", dev <= tol, dev, detail)


def knn_collapse_check(instances: int = 100, seed: int = 0) -> CheckResult:
    """Constant noise leaves the ranking to the probabilities alone."""
    rng = make_rng([seed, 11])
    mismatches = 0
    for _ in range(instances):
        n = int(rng.integers(3, 12))
        k = int(rng.integers(1, n))
        P = edge_probabilities(rng.standard_normal((n, int(rng.integers(1, 4)))), float(rng.uniform(0.1, 3)))
        q = np.full((n, n - 1), float(rng.uniform(0.05, 0.95)))
        if not np.array_equal(gumbel_top_k(P, k, q=q).edges, knn_baseline(P, k).edges):
            mismatches += 1
    return CheckResult("knn collapse", mismatches == 0, mismatches, f"{instances} instances")


def sampling_suite(seed: int = 0) -> list[CheckResult]:
    return [sampling_frequency_check(seed=seed), knn_collapse_check(seed=seed)]
