"""Exception types shared across the package."""


class BlockCTError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(BlockCTError, ValueError):
    """A configuration value, file, or split request is invalid."""


class GeometryError(BlockCTError, ValueError):
    """A geometrically undefined request (degenerate ray, source inside a block, ...)."""


class ScheduleError(BlockCTError, RuntimeError):
    """A sampling schedule cannot be fulfilled as requested."""


class DivergenceError(BlockCTError, RuntimeError):
    """Iterate norm exploded or became non-finite.

    Carries the last epoch that completed with a finite, bounded state and the
    trace collected up to that point.
    """

    def __init__(self, message, last_good_epoch=None, trace=None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch
        self.trace = trace


class BudgetExceededError(BlockCTError, MemoryError):
    """Materializing a block would exceed the configured memory budget."""


class ExecutorError(BlockCTError, RuntimeError):
    """A worker task failed; identifies the failing task descriptor."""

    def __init__(self, message, task=None):
        super().__init__(message)
        self.task = task
