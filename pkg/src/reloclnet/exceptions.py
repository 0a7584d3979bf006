"""Exception hierarchy shared by every module of the package."""


class ReLoCLNetError(Exception):
    """Base class for all errors raised by reloclnet."""


class DimensionError(ReLoCLNetError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(ReLoCLNetError, ValueError):
    """An operation is undefined on its input (e.g. every position masked)."""


class ConfigError(ReLoCLNetError, ValueError):
    """A configuration value is invalid or infeasible."""


class DataError(ReLoCLNetError, ValueError):
    """Input data or a file on disk is malformed."""


class UsageError(ReLoCLNetError, RuntimeError):
    """An API was used out of order, e.g. backward on a consumed graph."""


class NonFiniteError(ReLoCLNetError, FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


class TrainingAborted(ReLoCLNetError, RuntimeError):
    """Training stopped because a loss became non-finite."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
