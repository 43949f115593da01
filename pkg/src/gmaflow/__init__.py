"""Global motion aggregation (GMA) and a toy-scale iterative optical flow pipeline."""

from .core import AttentionMatrix, FeatureMap, FlowField, ImageGrid, ShapeError, flatten_hw, softmax_rows, unflatten_hw
from .gma import AlphaMode, CombineMode, GmaConfig, GmaParams, Variant, gma_backward, gma_forward, init_params

__version__ = "0.1.0"

__all__ = [
    "AlphaMode",
    "AttentionMatrix",
    "CombineMode",
    "FeatureMap",
    "FlowField",
    "GmaConfig",
    "GmaParams",
    "ImageGrid",
    "ShapeError",
    "Variant",
    "flatten_hw",
    "gma_backward",
    "gma_forward",
    "init_params",
    "softmax_rows",
    "unflatten_hw",
]
