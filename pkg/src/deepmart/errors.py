"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class UnsupportedModelError(InvalidArgumentError):
    """The operation is not defined for the given model kind."""


class ConfigError(ValueError):
    """An experiment configuration could not be parsed or validated."""


class TrainingDivergenceError(RuntimeError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, message, stage=None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage
