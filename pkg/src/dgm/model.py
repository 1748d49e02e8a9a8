"""Model configuration, layer stack, forward pass and checkpoints."""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import NodeDataset
from .graph import ConfigError, SampledGraph, dgm_forward, make_rng
from .layers import MLP, SGCN, EdgeConv, Linear, Module
from .tensor import Tensor

CHECKPOINT_VERSION = 1
GRAPH_MODES = ("dgm", "mdgm", "knn")


@dataclass
class LayerSpec:
    k: int = 5
    graph_width: int = 16
    node_width: int = 32
    f: str = "edge_conv"  # graph-feature function for layers after the first
    g: str = "edge_conv"  # node convolution: edge_conv or sgcn

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.graph_width < 1 or self.node_width < 1:
            raise ConfigError("layer widths must be positive")
        if self.f not in ("edge_conv", "mlp", "identity"):
            raise ConfigError(f"unknown graph-feature function {self.f!r}")
        if self.g not in ("edge_conv", "sgcn"):
            raise ConfigError(f"unknown node convolution {self.g!r}")


@dataclass
class ModelConfig:
    layers: list[LayerSpec] = field(default_factory=lambda: [LayerSpec(), LayerSpec()])
    graph_mode: str = "dgm"
    node_input: str = "m1"
    graph_input: str = "m1"
    lam: float = 1.0
    epochs: int = 300
    lr_levels: list[float] = field(default_factory=lambda: [0.01, 0.001, 0.0001])
    lr_boundaries: list[int] = field(default_factory=lambda: [100, 200])
    seed: int = 0
    edge_hidden: int | None = None
    graph_loss_last_layer_only: bool = False
    graph_loss_per_layer: bool = False
    detach_node_in_graph: bool = False
    repeats: int = 8
    task: str = "classification"  # or "regression" (zero-shot style vector targets)
    # unit-length learned graph features keep k * L log-probabilities from underflowing
    normalize_graph_features: bool = True

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        for spec in self.layers:
            spec.validate()
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"graph_mode must be one of {GRAPH_MODES}")
        if len(self.lr_levels) != len(self.lr_boundaries) + 1:
            raise ConfigError("need one more lr level than boundaries")
        if any(lr <= 0 for lr in self.lr_levels):
            raise ConfigError("learning rates must be positive")
        if any(b > a for a, b in zip(self.lr_levels, self.lr_levels[1:])):
            raise ConfigError("learning-rate levels must be non-increasing")
        if list(self.lr_boundaries) != sorted(self.lr_boundaries):
            raise ConfigError("lr boundaries must be increasing")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def sampler(self) -> str:
        return "knn" if self.graph_mode == "knn" else "gumbel"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "layers" in d:
            d["layers"] = [LayerSpec(**spec) for spec in d["layers"]]
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            return cls.from_dict(yaml.safe_load(text) or {})
        return cls.from_dict(json.loads(text))


@dataclass
class ForwardResult:
    logits: Tensor
    graphs: list[SampledGraph]
    graph_features: list[Tensor]
    probs: list


class DGMLayer(Module):
    def __init__(self, spec: LayerSpec, first: bool, d_graph_in: int, d_node_in: int,
                 rng: np.random.Generator, edge_hidden: int | None):
        self.spec = spec
        self.log_t = Tensor(np.zeros(()), requires_grad=True)
        self.f_mode = "identity" if first or spec.f == "identity" else spec.f
        if self.f_mode == "edge_conv":
            self.f = EdgeConv(d_graph_in, spec.graph_width, rng, edge_hidden)
        elif self.f_mode == "mlp":
            self.f = MLP([d_graph_in, spec.graph_width, spec.graph_width], rng)
        else:
            self.f = None
        if spec.g == "edge_conv":
            self.g = EdgeConv(d_node_in, spec.node_width, rng, edge_hidden)
        else:
            self.g = SGCN(d_node_in, spec.node_width, rng)

    @property
    def graph_out_width(self) -> int | None:
        return None if self.f is None else self.spec.graph_width

    def temperature(self) -> Tensor:
        return T.exp(self.log_t)


class DGMModel(Module):
    """Stack of (DGM block, graph convolution) pairs plus a linear head."""

    def __init__(self, config: ModelConfig, d_node: int, d_graph: int, num_outputs: int):
        config.validate()
        self.config = config
        self.dims = {"d_node": d_node, "d_graph": d_graph, "num_outputs": num_outputs}
        rng = make_rng(config.seed)
        layers = []
        xg_width, x_width = d_graph, d_node
        for n, spec in enumerate(config.layers):
            first = n == 0 or config.graph_mode == "knn"
            layer = DGMLayer(spec, first, xg_width, x_width, rng, config.edge_hidden)
            layers.append(layer)
            xhat_width = xg_width if layer.f is None else spec.graph_width
            x_width = spec.node_width
            if config.graph_mode == "knn":
                xg_width = x_width
            elif config.graph_mode == "mdgm":
                xg_width = xhat_width
            else:
                xg_width = xhat_width + x_width
        self.layers = layers
        self.head = Linear(x_width, num_outputs, rng)

    @classmethod
    def for_dataset(cls, config: ModelConfig, ds: NodeDataset, num_outputs: int | None = None) -> "DGMModel":
        return cls(config, ds.features(config.node_input).shape[1],
                   ds.features(config.graph_input).shape[1],
                   ds.class_count if num_outputs is None else num_outputs)

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def forward(self, ds: NodeDataset, rng: np.random.Generator | None) -> ForwardResult:
        cfg = self.config
        x = Tensor(ds.features(cfg.node_input))
        xg = Tensor(ds.features(cfg.graph_input))
        graphs, feats, probs = [], [], []
        prev_graph = None
        for n, layer in enumerate(self.layers):
            if n > 0:
                if cfg.graph_mode == "knn":
                    # kNN rule on the current node features
                    xg = x
                elif cfg.graph_mode == "mdgm":
                    xg = feats[-1]
                else:
                    node_part = x.detach() if cfg.detach_node_in_graph else x
                    xg = T.concat(feats[-1], node_part)
            f = layer.f
            if f is not None and cfg.normalize_graph_features:
                f = _normalized(f)
            x_hat, graph, P = dgm_forward(xg, prev_graph, f, layer.temperature(),
                                          layer.spec.k, rng, layer.f_mode, cfg.sampler)
            x = layer.g(x, graph)
            if layer.spec.g == "edge_conv":
                x = T.relu(x)
            graphs.append(graph)
            feats.append(x_hat)
            probs.append(P)
            prev_graph = graph
        return ForwardResult(self.head(x), graphs, feats, probs)

    # ---------------------------------------------------------------- persist

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for name, p in params.items():
            if tuple(state[name].shape) != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.values[...] = state[name]

    def save(self, path: str | Path, epoch: int = 0, extra: dict | None = None) -> None:
        params = self.parameters()
        manifest = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "dims": self.dims,
            "seed": self.config.seed,
            "epoch": epoch,
            "tensors": {name: list(p.shape) for name, p in params.items()},
            "extra": extra or {},
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr(_zinfo("manifest.json"), json.dumps(manifest, sort_keys=True, indent=2))
            for name, p in sorted(params.items()):
                zf.writestr(_zinfo(f"tensors/{name}"), p.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["DGMModel", dict]:
        with zipfile.ZipFile(path) as zf:
            try:
                manifest = json.loads(zf.read("manifest.json"))
            except KeyError:
                raise CheckpointError("checkpoint has no manifest") from None
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
            model = cls(ModelConfig.from_dict(manifest["config"]), **manifest["dims"])
            expected = {n: list(p.shape) for n, p in model.parameters().items()}
            if expected != manifest["tensors"]:
                raise CheckpointError("manifest tensor shapes do not match the configured model")
            state = {}
            for name, shape in manifest["tensors"].items():
                raw = zf.read(f"tensors/{name}")
                count = int(np.prod(shape)) if shape else 1
                if len(raw) != 8 * count:
                    raise CheckpointError(f"{name}: {len(raw)} bytes for shape {shape}")
                state[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        model.load_state(state)
        return model, manifest


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    sq = T.sum(T.mul(x, x), axis=1, keepdims=True)
    return T.mul(x, T.exp(T.mul(T.log(T.add(sq, eps)), -0.5)))


def _normalized(f):
    return lambda *args: l2_normalize_rows(f(*args))


class CheckpointError(ValueError):
    pass


def _zinfo(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical models give identical files
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


__all__ = [
    "LayerSpec", "ModelConfig", "DGMModel", "ForwardResult", "CheckpointError",
]