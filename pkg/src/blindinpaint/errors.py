class ConfigError(ValueError):
    """Invalid generator, model or training configuration."""


class TrainingFault(FloatingPointError):
    """A loss or gradient went non-finite during training."""
