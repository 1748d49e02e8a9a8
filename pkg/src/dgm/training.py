"""Optimisation loop, stochastic inference and evaluation protocols."""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import NodeDataset, fold_ids, standardize
from .graph import make_rng
from .losses import cross_entropy, graph_loss, nearest_representation, total_loss, zero_shot_loss
from .metrics import accuracy, homophily, per_class_accuracy
from .model import DGMModel, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class Schedule:
    """Piecewise-constant learning rate: ``levels[b]`` for epochs in interval b."""

    levels: list[float] = field(default_factory=lambda: [0.01, 0.001, 0.0001])
    boundaries: list[int] = field(default_factory=lambda: [100, 200])

    def lr(self, epoch: int) -> float:
        return self.levels[bisect.bisect_right(self.boundaries, epoch)]


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for name, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            p.values -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    task_loss: float
    graph_loss: float
    train_acc: float | None
    val_acc: float | None
    mean_edge_prob: list[float]
    homophily: list[float | None]
    temperature: list[float]


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


def _training_rng(seed: int) -> np.random.Generator:
    return make_rng([seed, 1])


def _step_losses(model: DGMModel, ds: NodeDataset, rng, targets: np.ndarray | None):
    cfg = model.config
    out = model.forward(ds, rng)
    train = ds.train
    if cfg.task == "classification":
        task = cross_entropy(out.logits, ds.labels, train)
        pred = np.argmax(out.logits.values, axis=1)
        truth, classes = ds.labels, ds.class_count
    else:
        rows = np.flatnonzero(train)
        task = zero_shot_loss(T.gather_rows(out.logits, rows), targets[rows])
        # nearest training representation as the predicted category; one class
        # for all nodes so the reward weighting uses global accuracy
        near = nearest_representation(out.logits.values, targets[rows])
        pred = np.where(rows[near] == np.arange(ds.num_nodes), 0, 1)
        truth, classes = np.zeros(ds.num_nodes, np.int64), 2
    g_loss = graph_loss(pred, truth, out.graphs, train, classes,
                        cfg.graph_loss_last_layer_only, cfg.graph_loss_per_layer)
    return out, task, g_loss, pred


def train(model: DGMModel, data: NodeDataset | Sequence[NodeDataset], config: ModelConfig | None = None,
          targets: np.ndarray | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[DGMModel, History]:
    """Full-batch Adam training; a list of datasets is treated as separate
    graphs, each taking one optimiser step per epoch."""
    cfg = config or model.config
    datasets = [data] if isinstance(data, NodeDataset) else list(data)
    for ds in datasets:
        if not ds.train.any():
            raise ValueError("training mask is empty")
    if cfg.task == "regression" and targets is None:
        raise ValueError("regression task needs target vectors")
    sched = Schedule(list(cfg.lr_levels), list(cfg.lr_boundaries))
    params = model.parameters()
    opt = Adam(params)
    rng = _training_rng(cfg.seed)
    history = History()
    for epoch in range(cfg.epochs):
        lr = sched.lr(epoch)
        sums = np.zeros(2)
        correct = total = 0
        probs_acc, homo_acc = [], []
        for ds in datasets:
            opt.zero_grad()
            out, task, g_loss, pred = _step_losses(model, ds, rng, targets)
            loss = total_loss(task, g_loss, cfg.lam)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}: task={task.item()} graph={g_loss.item()}")
            loss.backward()
            for name, p in params.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericError(f"non-finite gradient for {name} at epoch {epoch}")
            opt.step(lr)
            sums += (task.item(), g_loss.item())
            if cfg.task == "classification":
                correct += int(np.sum(pred[ds.train] == ds.labels[ds.train]))
                total += int(ds.train.sum())
            probs_acc.append([float(g.edge_prob.mean()) for g in out.graphs])
            homo_acc.append([homophily(g, ds.labels, ds.train) for g in out.graphs])
        val = None
        if len(datasets) == 1 and datasets[0].val.any() and cfg.task == "classification":
            val = accuracy(np.argmax(out.logits.values, axis=1), datasets[0].labels, datasets[0].val)
        rec = EpochRecord(
            epoch=epoch + 1,
            lr=lr,
            task_loss=float(sums[0] / len(datasets)),
            graph_loss=float(sums[1] / len(datasets)),
            train_acc=correct / total if total else None,
            val_acc=val,
            mean_edge_prob=np.mean(probs_acc, axis=0).tolist(),
            homophily=_mean_optional(homo_acc),
            temperature=[float(np.exp(layer.log_t.values)) for layer in model.layers],
        )
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d task %.4f graph %.4f", rec.epoch, rec.task_loss, rec.graph_loss)
    return model, history


def _mean_optional(rows: list[list[float | None]]) -> list[float | None]:
    out = []
    for col in zip(*rows):
        vals = [v for v in col if v is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return out


def predict_stochastic(model: DGMModel, ds: NodeDataset, repeats: int = 8,
                       rng: np.random.Generator | None = None,
                       allowed: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sum softmax outputs over ``repeats`` sampled graphs and take the argmax
    (lowest class on ties). ``allowed`` restricts the argmax to some classes."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = rng if rng is not None else make_rng([model.config.seed, 2])
    scores = None
    with T.no_grad():
        for _ in range(repeats):
            soft = T.softmax_values(model.forward(ds, rng).logits.values, axis=1)
            scores = soft if scores is None else scores + soft
    pick = scores
    if allowed is not None:
        pick = np.full_like(scores, -np.inf)
        pick[:, list(allowed)] = scores[:, list(allowed)]
    return np.argmax(pick, axis=1), scores


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float]
    predictions: np.ndarray
    mask: np.ndarray


def evaluate(model: DGMModel, ds: NodeDataset, mask, repeats: int = 8,
             rng: np.random.Generator | None = None) -> EvalResult:
    mask = np.asarray(mask, bool)
    pred, _ = predict_stochastic(model, ds, repeats, rng)
    return EvalResult(accuracy(pred, ds.labels, mask),
                      per_class_accuracy(pred, ds.labels, mask, ds.class_count).tolist(), pred, mask)


def evaluate_inductive(model: DGMModel, ds: NodeDataset, repeats: int = 8,
                       rng: np.random.Generator | None = None) -> EvalResult:
    """Frozen model over all nodes; metrics on the unseen mask (or on the test
    mask when nothing is held out)."""
    if np.any(ds.unseen & (ds.train | ds.val)):
        raise ValueError("unseen mask overlaps train/val")
    mask = ds.unseen if ds.unseen.any() else ds.test
    return evaluate(model, ds, mask, repeats, rng)


def fit(config: ModelConfig, ds: NodeDataset, **kw) -> tuple[DGMModel, History]:
    model = DGMModel.for_dataset(config, ds)
    return train(model, ds, config, **kw)


def run_inductive(config: ModelConfig, ds: NodeDataset, repeats: int = 8) -> tuple[EvalResult, DGMModel, History]:
    """Train without the unseen nodes, then evaluate over the whole population."""
    seen = ds.subset(~ds.unseen)
    model, hist = fit(config, seen)
    return evaluate_inductive(model, ds, repeats), model, hist


@dataclass
class CVResult:
    fold_scores: list[float]
    folds: np.ndarray
    histories: list[History] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_scores))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_scores))


def cross_validate(config: ModelConfig, ds: NodeDataset, folds: int = 10, seed: int = 0,
                   fit_predict: Callable[[NodeDataset], np.ndarray] | None = None,
                   repeats: int = 8, preprocess: Callable[[NodeDataset], NodeDataset] | None = standardize,
                   ) -> CVResult:
    """Stratified k-fold: each fold is the test mask once, the rest trains.

    ``fit_predict`` may replace the model with any callable mapping a masked
    dataset to per-node predictions.
    """
    ids = fold_ids(ds.labels, folds, seed)
    scores, histories = [], []
    for f in range(folds):
        fold_ds = ds.with_masks(train=ids != f, test=ids == f)
        if preprocess is not None:
            fold_ds = preprocess(fold_ds)
        if fit_predict is not None:
            pred = fit_predict(fold_ds)
        else:
            model, hist = fit(replace(config), fold_ds)
            histories.append(hist)
            pred, _ = predict_stochastic(model, fold_ds, repeats)
        scores.append(accuracy(pred, fold_ds.labels, fold_ds.test))
    return CVResult(scores, ids, histories)
