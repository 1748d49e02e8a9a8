"""Evaluation metrics and the JSON metrics report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import SampledGraph
from .losses import per_class_accuracy

__all__ = ["accuracy", "per_class_accuracy", "mean_iou", "shape_iou", "homophily", "MetricsReport"]


def accuracy(pred, truth, mask=None) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("accuracy over an empty mask")
        pred, truth = pred[mask], truth[mask]
    if truth.size == 0:
        raise ValueError("accuracy over an empty mask")
    return float(np.mean(pred == truth))


def shape_iou(pred, truth, parts: Sequence[int]) -> float:
    """Mean IoU over ``parts``; parts absent from both prediction and truth are skipped."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    allowed = set(int(p) for p in parts)
    bad = (set(np.unique(pred).tolist()) | set(np.unique(truth).tolist())) - allowed
    if bad:
        raise ValueError(f"labels {sorted(bad)} outside the part set {sorted(allowed)}")
    ious = []
    for part in sorted(allowed):
        p, t = pred == part, truth == part
        union = np.count_nonzero(p | t)
        if union == 0:
            continue
        ious.append(np.count_nonzero(p & t) / union)
    return float(np.mean(ious)) if ious else 1.0


def mean_iou(preds: Sequence, truths: Sequence, part_sets: Sequence[Sequence[int]]) -> float:
    """Average of per-shape part-averaged IoU."""
    if not len(preds):
        raise ValueError("mean_iou needs at least one shape")
    return float(np.mean([shape_iou(p, t, s) for p, t, s in zip(preds, truths, part_sets)]))


def homophily(g: SampledGraph, labels, mask=None) -> float | None:
    """Share of edges with both endpoints in ``mask`` joining equal labels;
    None when no edge qualifies."""
    labels = np.asarray(labels)
    i, j = g.targets, g.sources
    keep = np.ones(len(i), bool) if mask is None else np.asarray(mask, bool)[i] & np.asarray(mask, bool)[j]
    if not keep.any():
        return None
    return float(np.mean(labels[i[keep]] == labels[j[keep]]))


@dataclass
class MetricsReport:
    accuracy: float | None = None
    per_class_accuracy: list[float] = field(default_factory=list)
    miou: float | None = None
    homophily: list[float | None] = field(default_factory=list)
    losses: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    wall_time: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())
