"""Multi-resolution open-vocabulary semantic segmentation on a numpy autodiff core."""

from .config import RunConfig, default_config, toy_config
from .errors import (ConfigError, ContractError, IOFailure, LayoutError, MROVSegError,
                     NumericError, ShapeError)
from .estimator import MROVSegSegmenter
from .metrics import ConfusionAccumulator, PQAccumulator, miou, panoptic_quality
from .model import MROVSeg, ModelConfig
from .text import TEMPLATES, HashTextEncoder

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConfusionAccumulator", "ContractError", "HashTextEncoder", "IOFailure",
    "LayoutError", "MROVSeg", "MROVSegError", "MROVSegSegmenter", "ModelConfig", "NumericError",
    "PQAccumulator", "RunConfig", "ShapeError", "TEMPLATES", "default_config", "miou",
    "panoptic_quality", "toy_config",
]
