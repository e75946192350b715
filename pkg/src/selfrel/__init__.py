"""Self-supervised pretraining with pixel- and channel-level self-relation distillation."""

from .config import TrainConfig, load_config, full_scale
from .errors import (CheckpointError, ConfigError, DecodeError, NonFiniteError, RejectedInputError,
                     TrainingStepError)

__version__ = "0.1.0"

__all__ = ["TrainConfig", "load_config", "full_scale", "CheckpointError", "ConfigError",
           "DecodeError", "NonFiniteError", "RejectedInputError", "TrainingStepError", "__version__"]
