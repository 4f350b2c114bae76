"""Masked next-frame autoregressive video pretraining at desk scale."""
from .config import ClipShape, ConfigError, RunConfig, get_preset
from .trainer import Trainer

__all__ = ["ClipShape", "ConfigError", "RunConfig", "Trainer", "get_preset"]
__version__ = "0.1.0"
