"""Stereo matching with window self-attention, epipolar cross-attention and optimal transport."""

from .config import ModelConfig, RdsSpec, RunConfig, preset
from .errors import AAUError, ConfigError, FormatError, NumericError, ShapeError
from .model import AAUformer, count_params, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AAUError",
    "AAUformer",
    "ConfigError",
    "FormatError",
    "ModelConfig",
    "NumericError",
    "RdsSpec",
    "RunConfig",
    "ShapeError",
    "count_params",
    "load_weights",
    "preset",
    "save_weights",
]
