"""Graph convolutions (EdgeConv, SGCN) and a plain perceptron block."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .graph import SampledGraph
from .tensor import Tensor

LEAKY_SLOPE = 0.2


class StructureError(ValueError):
    pass


class Module:
    """Parameter container; sub-modules and Tensors found on attributes are walked."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = glorot(d_in, d_out, rng)
        self.bias = Tensor(np.zeros((1, d_out)), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[1] != self.weight.shape[0]:
            raise T.ShapeError(f"Linear expects {self.weight.shape[0]} features, got {x.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Affine layers with relu in between; the last layer is linear unless
    ``final_relu`` is set."""

    def __init__(self, widths: list[int], rng: np.random.Generator, final_relu: bool = False):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.final_relu = final_relu

    def __call__(self, x) -> Tensor:
        h = T.as_tensor(x)
        for n, layer in enumerate(self.layers):
            h = layer(h)
            if n < len(self.layers) - 1 or self.final_relu:
                h = T.relu(h)
        return h


def mlp(x, params: MLP) -> Tensor:
    return params(x)


def _check_structure(g: SampledGraph, n: int) -> None:
    if g.num_nodes != n:
        raise T.ShapeError(f"graph has {g.num_nodes} nodes but features have {n} rows")
    if len(g.edges) == 0 or np.any(g.in_degree() == 0):
        lonely = np.flatnonzero(g.in_degree() == 0)
        raise StructureError(f"nodes without in-edges: {lonely[:10].tolist()}")


def _sorted_edges(g: SampledGraph) -> np.ndarray:
    order = np.lexsort((g.sources, g.targets))
    return g.edges[order]


class EdgeConv(Module):
    """h_psi(x_i, x_j) = MLP(concat(x_i, x_j - x_i)), summed over in-neighbours."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or d_out
        self.h = MLP([2 * d_in, hidden, d_out], rng)

    def __call__(self, x, g: SampledGraph) -> Tensor:
        return edge_conv(x, g, self)


def edge_conv(x, g: SampledGraph, params: EdgeConv) -> Tensor:
    x = T.as_tensor(x)
    n = x.shape[0]
    _check_structure(g, n)
    edges = _sorted_edges(g)
    xi = T.gather_rows(x, edges[:, 0])
    xj = T.gather_rows(x, edges[:, 1])
    h = params.h(T.concat(xi, T.sub(xj, xi)))
    return T.segment_sum(h, edges[:, 0], n, by_value=True)


class SGCN(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, slope: float = LEAKY_SLOPE):
        self.theta = glorot(d_in, d_out, rng)
        self.slope = slope

    def __call__(self, x, g: SampledGraph) -> Tensor:
        return sgcn_conv(x, g, self)


def neighbour_mean(x, g: SampledGraph) -> Tensor:
    """D^-1 A x for the sampled adjacency."""
    x = T.as_tensor(x)
    n = x.shape[0]
    _check_structure(g, n)
    edges = _sorted_edges(g)
    total = T.segment_sum(T.gather_rows(x, edges[:, 1]), edges[:, 0], n, by_value=True)
    inv_deg = 1.0 / np.bincount(edges[:, 0], minlength=n).astype(np.float64)
    return T.mul(total, Tensor(inv_deg[:, None]))


def sgcn_conv(x, g: SampledGraph, params: SGCN) -> Tensor:
    return T.leaky_relu(T.matmul(neighbour_mean(x, g), params.theta), params.slope)
