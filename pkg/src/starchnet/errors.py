"""Exception hierarchy shared by every starchnet module."""


class StarchNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StarchNetError, ValueError):
    pass


class ArgumentError(StarchNetError, ValueError):
    pass


class NonFiniteError(StarchNetError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class DatasetError(StarchNetError):
    pass


class DecodeError(StarchNetError):
    pass


class LoadError(StarchNetError):
    """Checkpoint tensors could not be mapped onto a model."""


class OptimizerError(StarchNetError):
    pass


class CheckpointError(StarchNetError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    pass


class TrainingError(StarchNetError):
    pass


class MetricError(StarchNetError, ValueError):
    pass


class ConfigError(StarchNetError, ValueError):
    pass
