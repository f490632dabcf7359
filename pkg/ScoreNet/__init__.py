"""Noise-conditional score networks, the U-Net baseline and their checkpoints."""

from .checkpoint import (
    CheckpointFormatError,
    CheckpointVersionError,
    load_checkpoint,
    load_model,
    save_model,
)
from .model import ModelConfigError, ScoreModel, ScoreModelConfig, build_model

__all__ = [
    "CheckpointFormatError",
    "CheckpointVersionError",
    "ModelConfigError",
    "ScoreModel",
    "ScoreModelConfig",
    "build_model",
    "load_checkpoint",
    "load_model",
    "save_model",
]
