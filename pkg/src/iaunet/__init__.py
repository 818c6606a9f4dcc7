"""Identity-aware U-Net: a U-Net segmenter with a mask-gated embedding branch
trained jointly under a triplet loss, built on a small numpy autodiff core."""

from .errors import (CheckpointError, ConfigurationError, DataValidationError, DimensionError,
                     IAUNetError, NumericError, UsageError)
from .losses import LossConfig
from .model import IAUNet, ModelConfig
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = ["IAUNet", "ModelConfig", "LossConfig", "TrainConfig", "Trainer", "IAUNetError",
           "UsageError", "DimensionError", "ConfigurationError", "DataValidationError",
           "CheckpointError", "NumericError", "__version__"]
