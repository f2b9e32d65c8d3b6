"""Geometry-disentangled attention network for point clouds, on numpy."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateGraphError,
    FormatError,
    GDAError,
    InvalidInputError,
    NumericError,
    ShapeError,
    TrainingDivergence,
)
from .estimators import GDANetClassifier, GDANetSegmenter
from .gdm import GeometryDisentangler, disentangle, disentangle_cloud, spectral_check
from .graph import GraphConfig, NeighborGraph, build_adjacency, knn
from .model import ModelConfig, count_params, init_model, load_checkpoint, save_checkpoint
from .pointcloud import PointCloud, augment, generate_synthetic, load_cloud, normalize_unit_sphere

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DegenerateGraphError",
    "FormatError",
    "GDAError",
    "GDANetClassifier",
    "GDANetSegmenter",
    "GeometryDisentangler",
    "GraphConfig",
    "InvalidInputError",
    "ModelConfig",
    "NeighborGraph",
    "NumericError",
    "PointCloud",
    "ShapeError",
    "TrainingDivergence",
    "augment",
    "build_adjacency",
    "count_params",
    "disentangle",
    "disentangle_cloud",
    "generate_synthetic",
    "init_model",
    "knn",
    "load_checkpoint",
    "load_cloud",
    "normalize_unit_sphere",
    "save_checkpoint",
    "spectral_check",
]
