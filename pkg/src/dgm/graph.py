"""Differentiable graph module: edge probabilities, sampling and the DGM block."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

Q_EPS = 1e-12


class ConfigError(ValueError):
    pass


class DegreeClampWarning(UserWarning):
    pass


def make_rng(seed: int | None) -> np.random.Generator:
    """Counter-based, seedable generator; use ``rng.spawn(n)`` to split streams."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class EdgeProbabilityMatrix:
    probs: Tensor
    temperature: Tensor
    log_probs: Tensor

    @property
    def num_nodes(self) -> int:
        return self.probs.shape[0]


@dataclass
class SampledGraph:
    """Directed graph with ``edges[e] = (i, j)`` meaning j is an in-neighbour of i.

    Edges are kept sorted by (i, j). ``edge_p`` holds the probability each edge
    was sampled under and stays connected to the tape of the generating
    probabilities; ``edge_log_p`` is its logarithm computed without underflow.
    """

    edges: np.ndarray
    edge_p: Tensor
    edge_log_p: Tensor
    k: int
    num_nodes: int

    @classmethod
    def from_edges(cls, edges, edge_p, num_nodes: int) -> "SampledGraph":
        """Build from explicit (i, j) pairs and their probabilities."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        edge_p = T.as_tensor(edge_p)
        deg = np.bincount(edges[:, 0], minlength=num_nodes)
        return cls(edges, edge_p, T.log(edge_p, clamp=True), int(deg.max(initial=0)), num_nodes)

    @property
    def edge_prob(self) -> np.ndarray:
        return self.edge_p.values

    @property
    def targets(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def sources(self) -> np.ndarray:
        return self.edges[:, 1]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.num_nodes)

    def to_edge_list(self) -> str:
        return "".join(f"{i} {j} {p:.17g}\n" for (i, j), p in zip(self.edges, self.edge_prob))

    def to_dot(self, name: str = "G") -> str:
        lines = [f"digraph {name} {{"]
        lines += [f"  {n};" for n in range(self.num_nodes)]
        for (i, j), p in zip(self.edges, self.edge_prob):
            lines.append(f'  {j} -> {i} [label="{p:.4g}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path, fmt: str = "edges") -> None:
        if fmt not in ("edges", "dot"):
            raise ValueError(f"unknown graph format {fmt!r}; use 'edges' or 'dot'")
        text = self.to_dot() if fmt == "dot" else self.to_edge_list()
        Path(path).write_text(text)


def read_edge_list(path: str | Path) -> list[tuple[int, int, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, j, p = line.split()
            out.append((int(i), int(j), float(p)))
    return out


def edge_probabilities(x_hat, t) -> EdgeProbabilityMatrix:
    """p_ij = exp(-t * ||x_i - x_j||^2)."""
    x_hat, t = T.as_tensor(x_hat), T.as_tensor(t)
    log_p = T.negate(T.mul(t, T.pairwise_sq_dist(x_hat)))
    return EdgeProbabilityMatrix(T.exp(log_p), t, log_p)


def uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.random(shape) + Q_EPS) / (1.0 + 2.0 * Q_EPS)


def _clamp_k(k: int, n: int) -> int:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < 2:
        raise ValueError(f"sampling needs at least 2 nodes, got {n}")
    if k >= n:
        warnings.warn(f"k={k} >= N={n}; clamping degree to {n - 1}", DegreeClampWarning, stacklevel=3)
        return n - 1
    return k


def _select(P: EdgeProbabilityMatrix, scores: np.ndarray, k: int) -> SampledGraph:
    n = scores.shape[0]
    np.fill_diagonal(scores, -np.inf)
    # stable sort on the negated score: equal scores keep the lower index first
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    cols = np.sort(order, axis=1).reshape(-1)
    rows = np.repeat(np.arange(n), k)
    edges = np.stack([rows, cols], axis=1)
    return SampledGraph(
        edges=edges,
        edge_p=T.gather_entries(P.probs, rows, cols),
        edge_log_p=T.gather_entries(P.log_probs, rows, cols),
        k=k,
        num_nodes=n,
    )


def gumbel_top_k(P: EdgeProbabilityMatrix, k: int, rng: np.random.Generator | None = None,
                 q: np.ndarray | None = None) -> SampledGraph:
    """Sample k in-edges per node without replacement (Gumbel-Top-k).

    Scores are ``log p_ij - log(-log q_j)`` on detached probabilities. ``q``
    may be supplied as an N x (N-1) array of off-diagonal uniforms; otherwise
    it is drawn from ``rng``.
    """
    n = P.num_nodes
    k = _clamp_k(k, n)
    if q is None:
        if rng is None:
            raise ValueError("gumbel_top_k needs an rng or explicit q")
        q = uniform_open(rng, (n, n - 1))
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (n, n - 1):
        raise T.ShapeError(f"q must have shape {(n, n - 1)}, got {q.shape}")
    off = ~np.eye(n, dtype=bool)
    noise = np.zeros((n, n))
    noise[off] = -np.log(-np.log(q)).reshape(-1)
    return _select(P, P.log_probs.values + noise, k)


def knn_baseline(P: EdgeProbabilityMatrix, k: int) -> SampledGraph:
    """Deterministic top-k by probability, i.e. the k nearest neighbours."""
    k = _clamp_k(k, P.num_nodes)
    return _select(P, P.log_probs.values.copy(), k)


def dgm_forward(x_g, edges_in: SampledGraph | None, f, t, k: int,
                rng: np.random.Generator | None, mode: str = "identity",
                sampler: str = "gumbel"):
    """One DGM block: graph features, edge probabilities, sampled graph.

    ``f`` is the graph-feature function (ignored in identity mode); for
    ``edge_conv`` it is called as ``f(x_g, edges_in)``, for ``mlp`` as
    ``f(x_g)``. Returns ``(x_hat, graph, P)``.
    """
    if mode == "identity":
        x_hat = T.as_tensor(x_g)
    elif mode == "mlp":
        x_hat = f(x_g)
    elif mode == "edge_conv":
        if edges_in is None:
            raise ConfigError("edge_conv graph features need an input graph")
        x_hat = f(x_g, edges_in)
    else:
        raise ConfigError(f"unknown graph-feature mode {mode!r}")
    P = edge_probabilities(x_hat, t)
    if sampler == "gumbel":
        graph = gumbel_top_k(P, k, rng)
    elif sampler == "knn":
        graph = knn_baseline(P, k)
    else:
        raise ConfigError(f"unknown sampler {sampler!r}")
    return x_hat, graph, P
