"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation creates a :class:`Tensor` and, when any input
requires a gradient, records a node carrying a monotonically increasing
sequence number. ``backward`` collects the nodes reachable from the root and
replays them in decreasing sequence order, i.e. exact reverse recording order.
The graph is rebuilt on every forward pass (define-by-run).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_LOG = 1e-12
# memory cap (in doubles) for the difference block in pairwise_sq_dist
_BLOCK_ELEMS = 1 << 22

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class _Node:
    seq: int
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Double-precision array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else self._node.seq

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> "Tape":
        tape = Tape.collect(self)
        tape.backward(self, seed)
        return tape

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the operations leading to one root tensor."""

    def __init__(self, nodes: list[tuple[Tensor, _Node]]):
        self.nodes = nodes

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[tuple[Tensor, _Node]] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append((t, t._node))
            stack.extend(t._node.parents)
        found.sort(key=lambda item: item[1].seq)
        return cls(found)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if root.values.size != 1:
                raise ShapeError("backward() without a seed needs a scalar root")
            seed = np.ones_like(root.values)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
        for out, node in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        if root._node is None and root.requires_grad:
            root.grad = seed.copy() if root.grad is None else root.grad + seed


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording any tape nodes."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(values: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(next(_counter), tuple(parents), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, clamp: bool = False) -> Tensor:
    """Natural log. With ``clamp`` the input is floored at ``EPS_LOG`` and the
    gradient is zero where the floor is active."""
    a = as_tensor(a)
    x = a.values
    if clamp:
        active = x < EPS_LOG
        safe = np.where(active, EPS_LOG, x)
        return _make(np.log(safe), (a,), lambda g: (np.where(active, 0.0, g / safe),))
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value (enable clamping)")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.values > 0
    return _make(np.where(pos, a.values, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.values > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.values * scale, (a,), lambda g: (g * scale,))


def clamp(a, lo: float = -math.inf, hi: float = math.inf) -> Tensor:
    a = as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _make(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,))


def elementwise(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by name; convenient for the gradient suite."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "exp": exp,
        "log": log,
        "negate": negate,
        "leaky_relu": leaky_relu,
        "relu": relu,
        "clamp": clamp,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs, **kwargs)


# ------------------------------------------------------------------ reductions


def _check_axis(x: Tensor, axis: int | None) -> None:
    if axis is None:
        if x.values.size == 0:
            raise ShapeError("reduction over an empty tensor")
        return
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise ShapeError(f"reduction over empty axis {axis} of shape {x.shape}")


def _expand(g: np.ndarray, x: Tensor, axis: int | None, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    _check_axis(x, axis)
    return _make(
        x.values.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (np.array(_expand(g, x, axis, keepdims)),),
    )


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    n = x.values.size if axis is None else x.shape[axis]
    return _make(
        x.values.mean(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand(g, x, axis, keepdims) / n,),
    )


def max(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max reduction; the gradient goes to the first index attaining the max."""
    x = as_tensor(x)
    _check_axis(x, axis)
    if axis is None:
        flat = x.values.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx].reshape((1,) * x.values.ndim if keepdims else ())

        def back(g):
            full = np.zeros(flat.shape)
            full[idx] = np.asarray(g).reshape(-1)[0]
            return (full.reshape(x.shape),)

        return _make(out, (x,), back)

    arg = np.argmax(x.values, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.values, arg_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros(x.shape)
        np.put_along_axis(full, arg_k, gk, axis=axis)
        return (full,)

    return _make(out, (x,), back)


def reduce(op: str, x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    fns = {"sum": sum, "mean": mean, "max": max}
    if op not in fns:
        raise ValueError(f"unknown reduction {op!r}")
    return fns[op](x, axis=axis, keepdims=keepdims)


# --------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


def pairwise_sq_dist(x) -> Tensor:
    """Squared Euclidean distance between every pair of rows; exact zero diagonal."""
    x = as_tensor(x)
    if x.values.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"pairwise_sq_dist needs a non-empty N x d matrix, got {x.shape}")
    v = x.values
    n = v.shape[0]
    out = np.empty((n, n))
    block = _BLOCK_ELEMS // (n * v.shape[1]) or 1
    for lo in range(0, n, block):
        diff = v[lo : lo + block, None, :] - v[None, :, :]
        out[lo : lo + block] = np.einsum("ijc,ijc->ij", diff, diff)

    def back(g):
        # d D_ij / d x_i = 2 (x_i - x_j), and D is symmetric in (i, j)
        gs = g + g.T
        return (2.0 * (gs.sum(axis=1)[:, None] * x.values - gs @ x.values),)

    return _make(out, (x,), back)


def concat(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: row mismatch between {a.shape} and {b.shape}")
    d1 = a.shape[1]
    return _make(
        np.concatenate([a.values, b.values], axis=1),
        (a, b),
        lambda g: (g[:, :d1], g[:, d1:]),
    )


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather_rows: index {bad} out of range for {n} rows")

    def back(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.values[idx], (x,), back)


def gather_entries(x, rows, cols) -> Tensor:
    """Pick ``x[rows[e], cols[e]]`` for each e; 1-D result."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        full = np.zeros(x.shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(x.values[rows, cols], (x,), back)


def segment_sum(x, segments, num_segments: int, by_value: bool = False) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets, in row order.

    With ``by_value`` each bucket adds its entries in ascending value order
    (per column), so the result depends only on the multiset of rows per
    bucket and not on how they were listed.
    """
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum: {segments.shape[0]} ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:])
    if by_value and x.values.ndim == 2:
        for c in range(x.shape[1]):
            order = np.lexsort((x.values[:, c], segments))
            np.add.at(out[:, c], segments[order], x.values[order, c])
    else:
        np.add.at(out, segments, x.values)
    return _make(out, (x,), lambda g: (g[segments],))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = Tensor(x.values.max(axis=axis, keepdims=True))
    z = sub(x, shift)
    return sub(z, log(sum(exp(z), axis=axis, keepdims=True)))


def softmax_values(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    errors: list[np.ndarray] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        # the module-level ``max`` is the tensor op, hence numpy here
        return float(np.max([e.max() if e.size else 0.0 for e in self.errors])) if self.errors else 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_gradient(
    fn: Callable[..., Tensor],
    params: Tensor | Sequence[Tensor],
    step: float = 1e-6,
    tol: float | None = None,
) -> GradCheckReport:
    """Compare tape gradients of a scalar ``fn()`` against central differences.

    ``fn`` is called with no arguments and must read ``params`` itself so
    that perturbations take effect. Relative error per element is
    ``|a - n| / max(|a|, |n|, 1)``; the floor of 1 keeps near-zero entries
    from dominating.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    numeric = []
    for p in params:
        num = np.zeros(p.shape)
        flat = p.values.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        numeric.append(num)

    errors = [
        np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        for a, n in zip(analytic, numeric)
    ]
    return GradCheckReport(analytic, numeric, errors)
