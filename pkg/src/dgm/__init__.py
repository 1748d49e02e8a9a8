"""Learned latent graphs for graph convolutional networks.

A differentiable graph module predicts edge probabilities from a feature
embedding, samples a fixed-degree graph with the Gumbel-Top-k trick and trains
the probability branch with an accuracy-weighted reward loss.
"""

from .data import NodeDataset, PointCloudSet, make_splits, synth_clusters, synth_shapes
from .graph import SampledGraph, edge_probabilities, gumbel_top_k, knn_baseline, make_rng
from .model import DGMModel, LayerSpec, ModelConfig
from .training import cross_validate, predict_stochastic, train

__version__ = "0.1.0"

__all__ = [
    "NodeDataset", "PointCloudSet", "make_splits", "synth_clusters", "synth_shapes",
    "SampledGraph", "edge_probabilities", "gumbel_top_k", "knn_baseline", "make_rng",
    "DGMModel", "LayerSpec", "ModelConfig", "cross_validate", "predict_stochastic", "train",
]
