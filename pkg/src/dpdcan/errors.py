"""Exception types raised across the package."""


class DpdcanError(Exception):
    """Base class for all package errors."""


class DomainError(DpdcanError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(DpdcanError, ValueError):
    pass


class DegenerateError(DpdcanError, ValueError):
    """A vector whose direction is required has (near) zero norm."""


class EmptyClusterError(DpdcanError, RuntimeError):
    pass


class DivergenceError(DpdcanError, RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message, step=None, sample_index=None):
        super().__init__(message)
        self.step = step
        self.sample_index = sample_index


class CalibrationError(DpdcanError, RuntimeError):
    pass


class DataError(DpdcanError, ValueError):
    pass


class ConfigError(DpdcanError, ValueError):
    pass


class ClipInvariantError(DpdcanError, AssertionError):
    """A clipped per-sample gradient exceeded the clipping bound."""
