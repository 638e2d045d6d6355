"""Coarse-to-fine optical flow with cost-volume modulation and flow-field deformation."""

from .engine import ConvParams, ShapeError, Tensor, backward
from .network import ModelConfig, Variant, count_params, forward, init_params

__version__ = "0.1.0"

__all__ = [
    "ConvParams",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "Variant",
    "backward",
    "count_params",
    "forward",
    "init_params",
]
