"""Exception types shared across the toolkit."""


class FiberFieldError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FiberFieldError):
    """Invalid or inconsistent configuration; message carries the key path."""


class NonFiniteStateError(FiberFieldError):
    """A state became NaN/Inf during integration."""

    def __init__(self, message, fiber=None, time=None):
        super().__init__(message)
        self.fiber = fiber
        self.time = time


class CflViolation(FiberFieldError):
    """An explicit step exceeded its stability constraint."""


class MissingHistoryError(FiberFieldError):
    """The delay window requires history that was never recorded."""


class CacheMismatchError(FiberFieldError):
    """A precomputed convolution cache does not match the requested grid/potential."""
