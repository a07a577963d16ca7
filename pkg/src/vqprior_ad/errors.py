"""Exception types shared across the pipeline.

The CLI maps each family to a distinct exit status.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data could not be ingested or parsed."""


class ShapeError(ValueError):
    """Tensor or array shapes do not match what an operation expects."""


class TrainingDivergence(RuntimeError):
    """Loss became non-finite during training.

    ``state`` holds the last finite model state so callers can persist it.
    """

    def __init__(self, msg, state=None, log=None):
        super().__init__(msg)
        self.state = state
        self.log = log


class WallClockExceeded(RuntimeError):
    """Training hit its wall-clock budget before finishing all epochs."""

    def __init__(self, msg, state=None, log=None):
        super().__init__(msg)
        self.state = state
        self.log = log
