"""Multi-speaker multi-style acoustic model with timbre/style disentanglement."""

from .config import ModelConfig, TrainingSchedule
from .model import AcousticModel, VarianceOutputs, build_model, interpolate_style, length_regulate

__all__ = [
    "AcousticModel",
    "ModelConfig",
    "TrainingSchedule",
    "VarianceOutputs",
    "build_model",
    "interpolate_style",
    "length_regulate",
]
__version__ = "0.1.0"
