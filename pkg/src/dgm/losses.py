"""Task losses and the accuracy-weighted graph loss."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import SampledGraph
from .tensor import Tensor

LOG_PROD_MIN = -60.0
LOG_P_MIN = float(np.log(T.EPS_LOG))


def _mask_index(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.arange(n)
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ValueError("empty mask")
    return idx


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood over the masked nodes."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    idx = _mask_index(mask, n)
    if labels[idx].min() < 0 or labels[idx].max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    logp = T.log_softmax(T.gather_rows(logits, idx), axis=1)
    picked = T.gather_entries(logp, np.arange(idx.size), labels[idx])
    return T.negate(T.mean(picked))


def per_class_accuracy(pred, truth, mask=None, num_classes: int | None = None) -> np.ndarray:
    """Recall per class on the mask; classes with no members get 0."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    idx = np.arange(len(truth)) if mask is None else _mask_index(mask, len(truth))
    if num_classes is None:
        num_classes = int(truth.max()) + 1 if truth.size else 0
    t, p = truth[idx], pred[idx]
    members = np.bincount(t, minlength=num_classes).astype(np.float64)
    hits = np.bincount(t[p == t], minlength=num_classes).astype(np.float64)
    return np.divide(hits, members, out=np.zeros(num_classes), where=members > 0)


def reward_weights(pred, truth, mask, num_classes: int) -> np.ndarray:
    """Per-node weight: acc - 1 for a correct node, acc for a wrong one, 0 off-mask."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    acc = per_class_accuracy(pred, truth, mask, num_classes)
    w = np.where(pred == truth, acc[truth] - 1.0, acc[truth])
    keep = np.zeros(len(truth), dtype=bool)
    keep[_mask_index(mask, len(truth))] = True
    return np.where(keep, w, 0.0)


def graph_loss(pred, truth, graphs: Sequence[SampledGraph], mask=None,
               num_classes: int | None = None, last_layer_only: bool = False,
               per_layer: bool = False) -> Tensor:
    """Sum over masked nodes of weight_i times the product of sampled in-edge
    probabilities over all layers.

    The product is evaluated as exp of a sum of floored log-probabilities with
    the exponent clamped to [-60, 0]. The weights are constants. With
    ``per_layer`` each layer contributes its own product term instead of one
    joint product across layers.
    """
    truth = np.asarray(truth, dtype=np.int64)
    if not graphs:
        raise ValueError("graph loss needs at least one sampled graph")
    if num_classes is None:
        num_classes = int(truth.max()) + 1
    n = len(truth)
    weights = reward_weights(pred, truth, mask, num_classes)
    if last_layer_only:
        graphs = graphs[-1:]
    per_node = []
    for g in graphs:
        if g.edge_log_p is None or len(g.edge_log_p.values) != len(g.edges):
            raise ValueError("sampled graph is missing edge probabilities")
        # floor at log(1e-12): same value and gradient as log(clamp(p, 1e-12))
        logs = T.clamp(g.edge_log_p, LOG_P_MIN, 0.0)
        per_node.append(T.segment_sum(logs, g.targets, n))
    if not per_layer:
        joint = per_node[0]
        for extra in per_node[1:]:
            joint = T.add(joint, extra)
        per_node = [joint]
    w = Tensor(weights)
    terms = [T.sum(T.mul(T.exp(T.clamp(lp, LOG_PROD_MIN, 0.0)), w)) for lp in per_node]
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


def total_loss(task, graph, lam: float = 1.0) -> Tensor:
    if lam == 0:
        return T.as_tensor(task)
    return T.add(task, T.mul(graph, lam))


def zero_shot_loss(w: Tensor, w_true) -> Tensor:
    """Sum of squared distances between predicted and target rows."""
    w_true = T.as_tensor(w_true)
    if w.shape != w_true.shape:
        raise T.ShapeError(f"zero_shot_loss: {w.shape} vs {w_true.shape}")
    d = T.sub(w, w_true)
    return T.sum(T.mul(d, d))


def nearest_representation(w: np.ndarray, reps: np.ndarray) -> np.ndarray:
    """Index of the closest row of ``reps`` for each row of ``w``."""
    d = ((w[:, None, :] - reps[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)
