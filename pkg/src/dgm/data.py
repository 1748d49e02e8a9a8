"""Datasets: synthetic generators, tabular/point-cloud I/O, preprocessing, splits."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import make_rng

MASK_NAMES = ("train", "val", "test", "unseen")


class DataError(ValueError):
    pass


class StratificationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NodeDataset:
    """Node features (one or two modalities), labels and disjoint masks."""

    modality1: np.ndarray
    labels: np.ndarray
    class_count: int
    modality2: np.ndarray | None = None
    train: np.ndarray | None = None
    val: np.ndarray | None = None
    test: np.ndarray | None = None
    unseen: np.ndarray | None = None
    standardized: bool = False
    selected: dict = field(default_factory=dict)
    category: int | None = None

    def __post_init__(self):
        n = len(self.labels)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "modality1", np.asarray(self.modality1, dtype=np.float64))
        if self.modality2 is not None:
            object.__setattr__(self, "modality2", np.asarray(self.modality2, dtype=np.float64))
        for name in MASK_NAMES:
            m = getattr(self, name)
            object.__setattr__(self, name, np.zeros(n, bool) if m is None else np.asarray(m, dtype=bool))
        if self.modality1.shape[0] != n:
            raise DataError(f"modality1 has {self.modality1.shape[0]} rows for {n} labels")
        if self.modality2 is not None and self.modality2.shape[0] != n:
            raise DataError(f"modality2 has {self.modality2.shape[0]} rows for {n} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        stacked = np.stack([getattr(self, m) for m in MASK_NAMES]).astype(int)
        if np.any(stacked.sum(axis=0) > 1):
            raise DataError("masks overlap")

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    def features(self, which: str) -> np.ndarray:
        """'m1', 'm2' or 'm1+m2'."""
        if which == "m1":
            return self.modality1
        if self.modality2 is None:
            if which in ("m2", "m1+m2"):
                raise DataError(f"feature set {which!r} needs a second modality")
        if which == "m2":
            return self.modality2
        if which == "m1+m2":
            return np.concatenate([self.modality1, self.modality2], axis=1)
        raise DataError(f"unknown feature set {which!r}")

    def with_masks(self, **masks) -> "NodeDataset":
        full = {name: masks.get(name, np.zeros(self.num_nodes, bool)) for name in MASK_NAMES}
        return replace(self, **full)

    def subset(self, keep) -> "NodeDataset":
        keep = np.asarray(keep, dtype=bool)
        return replace(
            self,
            modality1=self.modality1[keep],
            modality2=None if self.modality2 is None else self.modality2[keep],
            labels=self.labels[keep],
            **{name: getattr(self, name)[keep] for name in MASK_NAMES},
        )


@dataclass(frozen=True)
class Shape:
    points: np.ndarray
    parts: np.ndarray
    category: int


@dataclass(frozen=True)
class PointCloudSet:
    shapes: list[Shape]
    categories: dict[int, str]
    part_sets: dict[int, tuple[int, ...]]

    @property
    def part_count(self) -> int:
        return max(p for parts in self.part_sets.values() for p in parts) + 1

    def as_datasets(self, training: bool = True) -> list[NodeDataset]:
        out = []
        for s in self.shapes:
            n = len(s.parts)
            out.append(NodeDataset(
                modality1=s.points, labels=s.parts, class_count=self.part_count,
                train=np.full(n, training), test=np.full(n, not training), category=s.category,
            ))
        return out


# ------------------------------------------------------------------ synthetic


def _class_centers(classes: int, dim: int, separation: float, rng) -> np.ndarray:
    """Centers with all pairwise distances equal to ``separation`` when dim allows."""
    centers = np.zeros((classes, dim))
    if dim >= classes:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        centers = separation / math.sqrt(2.0) * basis.T
    elif dim >= 2:
        radius = separation / (2.0 * math.sin(math.pi / classes)) if classes > 1 else 0.0
        ang = 2.0 * math.pi * np.arange(classes) / classes
        centers[:, 0] = radius * np.cos(ang)
        centers[:, 1] = radius * np.sin(ang)
    else:
        centers[:, 0] = separation * np.arange(classes)
    return centers - centers.mean(axis=0)


def synth_clusters(N: int = 300, classes: int = 3, d_node: int = 8, d_graph: int = 4,
                   separation: float = 5.0, noise: float = 1.0, seed: int = 0,
                   node_signal: float = 0.25) -> NodeDataset:
    """Clustered nodes with a known latent graph (same-class relation).

    Modality 2 (graph features) places each class at a center ``separation``
    away from the others, plus isotropic noise of scale ``noise``. Modality 1
    (node features) carries the same class structure shrunk by
    ``node_signal`` under unit noise, so it is only partially informative.
    """
    if classes < 1 or N < classes * 4:
        raise DataError(f"need N >= 4 * classes, got N={N}, classes={classes}")
    if d_node < 1 or d_graph < 1:
        raise DataError("feature widths must be positive")
    rng = make_rng(seed)
    labels = rng.permutation(np.arange(N) % classes)
    g_centers = _class_centers(classes, d_graph, separation, rng)
    n_centers = _class_centers(classes, d_node, separation * node_signal, rng)
    graph = g_centers[labels] + noise * rng.standard_normal((N, d_graph))
    node = n_centers[labels] + rng.standard_normal((N, d_node))
    return NodeDataset(modality1=node, modality2=graph, labels=labels, class_count=classes)


def latent_graph_homophily(labels) -> np.ndarray:
    """Ground-truth latent adjacency of a synthetic set: same-class pairs."""
    labels = np.asarray(labels)
    adj = labels[:, None] == labels[None, :]
    np.fill_diagonal(adj, False)
    return adj


SHAPE_CATEGORIES = {0: "lamp", 1: "spheres"}
SHAPE_PARTS = {0: (0, 1), 1: (2, 3)}


def _sample_sphere(rng, n: int, center, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def _sample_lamp(rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    # pole: cylinder surface along z; shade: cone frustum on top
    height = rng.uniform(2.0, 3.0)
    r_pole = rng.uniform(0.15, 0.25)
    n_pole = n // 2
    theta = rng.uniform(0, 2 * np.pi, n_pole)
    z = rng.uniform(0, height, n_pole)
    pole = np.stack([r_pole * np.cos(theta), r_pole * np.sin(theta), z], axis=1)
    n_shade = n - n_pole
    s = rng.uniform(0, 1, n_shade)
    r_shade = 1.0 - 0.5 * s
    theta = rng.uniform(0, 2 * np.pi, n_shade)
    shade = np.stack([r_shade * np.cos(theta), r_shade * np.sin(theta), height + 0.2 + 0.8 * s], axis=1)
    return np.concatenate([pole, shade]), np.repeat([0, 1], [n_pole, n_shade])


def _sample_spheres(rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    # stacked along the vertical axis so rotations about it keep parts distinct
    gap = rng.uniform(2.0, 2.5)
    a = _sample_sphere(rng, n // 2, (0.0, 0.0, 0.0), 1.0)
    b = _sample_sphere(rng, n - n // 2, (0.0, 0.0, gap), 0.7)
    return np.concatenate([a, b]), np.repeat([2, 3], [len(a), len(b)])


def synth_shapes(count: int = 8, points_per_shape: int = 2048, seed: int = 0,
                 categories: tuple[int, ...] = (0, 1), jitter: float = 0.01) -> PointCloudSet:
    """Composite two-primitive shapes with per-point part labels.

    Categories cycle over ``categories``; each shape is randomly rotated about
    the vertical axis and its points shuffled.
    """
    rng = make_rng(seed)
    makers = {0: _sample_lamp, 1: _sample_spheres}
    shapes = []
    for n in range(count):
        cat = categories[n % len(categories)]
        pts, parts = makers[cat](rng, points_per_shape)
        ang = rng.uniform(0, 2 * np.pi)
        c, s = math.cos(ang), math.sin(ang)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pts = pts @ rot.T + jitter * rng.standard_normal(pts.shape)
        pts -= pts.mean(axis=0)
        perm = rng.permutation(len(parts))
        shapes.append(Shape(pts[perm], parts[perm], cat))
    used = sorted(set(categories))
    return PointCloudSet(shapes, {c: SHAPE_CATEGORIES[c] for c in used},
                         {c: SHAPE_PARTS[c] for c in used})


def write_shape(shape: Shape, path: str | Path) -> None:
    rows = [f"{x:.17g} {y:.17g} {z:.17g} {p}" for (x, y, z), p in zip(shape.points, shape.parts)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_shape(path: str | Path, categories: dict[int, str] = SHAPE_CATEGORIES) -> Shape:
    """Read 'x y z part' lines; the category comes from the filename prefix."""
    path = Path(path)
    prefix = path.name.split("_")[0]
    by_name = {v: k for k, v in categories.items()}
    if prefix not in by_name:
        raise DataError(f"{path.name}: unknown category prefix {prefix!r}")
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 4:
        raise DataError(f"{path.name}: expected 4 columns, got {data.shape[1]}")
    return Shape(data[:, :3], data[:, 3].astype(np.int64), by_name[prefix])


# -------------------------------------------------------------------- tabular


def read_schema(path: str | Path) -> dict[str, list[str]]:
    """Plain key=value schema: label, modality1, modality2 (comma-separated columns)."""
    schema: dict[str, list[str]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"schema line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        schema[key] = [c.strip() for c in value.split(",") if c.strip()]
    for key in ("label", "modality1"):
        if not schema.get(key):
            raise DataError(f"schema is missing {key!r}")
    return schema


def load_tabular(path: str | Path, schema: dict[str, list[str]] | str | Path) -> NodeDataset:
    if not isinstance(schema, dict):
        schema = read_schema(schema)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        wanted = schema["label"] + schema["modality1"] + schema.get("modality2", [])
        missing = [c for c in wanted if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")

    label_col = schema["label"][0]

    def parse(cols):
        out = np.empty((len(rows), len(cols)))
        for r, row in enumerate(rows):
            for c, col in enumerate(cols):
                line = r + 2  # header is line 1
                try:
                    v = float(row[col])
                except (TypeError, ValueError):
                    raise DataError(f"line {line}, column {col!r}: cannot parse {row[col]!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"line {line}, column {col!r}: non-finite value {row[col]!r}")
                out[r, c] = v
        return out

    labels = np.empty(len(rows), dtype=np.int64)
    for r, row in enumerate(rows):
        try:
            labels[r] = int(row[label_col])
        except (TypeError, ValueError):
            raise DataError(f"line {r + 2}, column {label_col!r}: non-integer label {row[label_col]!r}") from None
    if labels.min() < 0:
        raise DataError("labels must be non-negative")
    m2 = parse(schema["modality2"]) if schema.get("modality2") else None
    return NodeDataset(modality1=parse(schema["modality1"]), modality2=m2, labels=labels,
                       class_count=int(labels.max()) + 1)


def write_tabular(ds: NodeDataset, path: str | Path, schema_path: str | Path | None = None) -> dict:
    m1 = [f"m1_{i}" for i in range(ds.modality1.shape[1])]
    m2 = [] if ds.modality2 is None else [f"m2_{i}" for i in range(ds.modality2.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + m1 + m2)
        for n in range(ds.num_nodes):
            vals = list(ds.modality1[n]) + ([] if ds.modality2 is None else list(ds.modality2[n]))
            w.writerow([int(ds.labels[n])] + [repr(float(v)) for v in vals])
    schema = {"label": ["label"], "modality1": m1}
    if m2:
        schema["modality2"] = m2
    if schema_path is not None:
        Path(schema_path).write_text("".join(f"{k}={','.join(v)}\n" for k, v in schema.items()))
    return schema


# -------------------------------------------------------------- preprocessing


def _standardize(x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    mu = x[rows].mean(axis=0)
    sd = x[rows].std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (x - mu) / safe, 0.0)


def standardize(ds: NodeDataset, modalities: tuple[str, ...] = ("modality1", "modality2")) -> NodeDataset:
    """Z-score features with statistics from training rows only."""
    if not ds.train.any():
        raise DataError("standardize needs a non-empty training mask")
    updates = {name: _standardize(getattr(ds, name), ds.train)
               for name in modalities if getattr(ds, name) is not None}
    return replace(ds, standardized=True, **updates)


def ridge_weights(x: np.ndarray, labels: np.ndarray, classes: int, alpha: float = 1.0) -> np.ndarray:
    """One-vs-rest ridge classifier weights (features x classes), targets +/-1."""
    xc = x - x.mean(axis=0)
    y = -np.ones((len(labels), classes))
    y[np.arange(len(labels)), labels] = 1.0
    y -= y.mean(axis=0)
    a = xc.T @ xc + alpha * np.eye(x.shape[1])
    return np.linalg.solve(a, xc.T @ y)


def eliminate_features(x: np.ndarray, labels: np.ndarray, classes: int, target_dim: int) -> np.ndarray:
    """Recursive elimination: drop the feature with the smallest ridge weight
    norm until ``target_dim`` remain. Returns kept column indices, sorted."""
    keep = np.arange(x.shape[1])
    while len(keep) > target_dim:
        w = ridge_weights(x[:, keep], labels, classes)
        score = np.abs(w).sum(axis=1)
        keep = np.delete(keep, int(np.argmin(score)))
    return keep


def select_features(ds: NodeDataset, target_dim: int = 30) -> NodeDataset:
    """Reduce every modality to ``target_dim`` columns using training rows only."""
    if target_dim <= 0:
        raise DataError("target_dim must be positive")
    if not ds.train.any():
        raise DataError("select_features needs a non-empty training mask")
    rows = ds.train
    updates, selected = {}, dict(ds.selected)
    for name in ("modality1", "modality2"):
        x = getattr(ds, name)
        if x is None:
            continue
        if target_dim >= x.shape[1]:
            keep = np.arange(x.shape[1])
        else:
            keep = eliminate_features(_standardize(x, rows)[rows], ds.labels[rows], ds.class_count, target_dim)
        updates[name] = x[:, keep]
        selected[name] = keep.tolist()
    return replace(ds, selected=selected, **updates)


# --------------------------------------------------------------------- splits


def fold_ids(labels, folds: int, seed: int) -> np.ndarray:
    """Stratified fold assignment: shuffle within each class, lay classes end
    to end and deal positions round-robin. Falls back to a plain shuffle (with
    a warning) when some class has fewer members than ``folds``."""
    labels = np.asarray(labels)
    if folds < 2:
        raise DataError("need at least 2 folds")
    rng = make_rng(seed)
    n = len(labels)
    counts = np.bincount(labels)
    present = counts[counts > 0]
    if present.min() < folds:
        warnings.warn(f"a class has fewer than {folds} members; using non-stratified folds",
                      StratificationWarning, stacklevel=2)
        order = rng.permutation(n)
    else:
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c))
                                for c in range(len(counts)) if counts[c]])
    out = np.empty(n, dtype=np.int64)
    out[order] = np.arange(n) % folds
    return out


def make_splits(ds: NodeDataset, scheme: str = "transductive", seed: int = 0,
                folds: int = 10) -> dict[str, np.ndarray]:
    """Masks for 'transductive' (90/10), 'inductive' (80/10/10 train/val/unseen)
    or, for 'kfold', ``{"fold": fold ids}``."""
    if scheme == "kfold":
        return {"fold": fold_ids(ds.labels, folds, seed)}
    f = fold_ids(ds.labels, 10, seed)
    if scheme == "transductive":
        return {"train": f != 0, "test": f == 0}
    if scheme == "inductive":
        return {"train": f >= 2, "val": f == 1, "unseen": f == 0}
    raise DataError(f"unknown split scheme {scheme!r}")
