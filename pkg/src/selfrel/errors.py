"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """An operation was handed input that violates its contract."""


class NonFiniteError(RejectedInputError):
    """An operation received NaN or infinite values."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class TrainingStepError(RuntimeError):
    """A training step produced non-finite values and was aborted."""


class CheckpointError(RuntimeError):
    """A checkpoint or array container could not be read or applied."""


class DecodeError(RuntimeError):
    """An image file could not be decoded."""
