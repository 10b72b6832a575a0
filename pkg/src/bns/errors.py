"""Exception types shared across the package."""


class BNSError(Exception):
    """Base class for all package errors."""


class DomainError(BNSError, ValueError):
    """A time or coefficient falls outside the region where it is defined."""


class SNRRangeError(BNSError, ValueError):
    """A signal-to-noise value cannot be attained by a scheduler.

    ``interval`` holds the attainable ``(low, high)`` SNR range.
    """

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


class DivergenceError(BNSError, ArithmeticError):
    """A solver produced a non-finite or exploding state."""

    def __init__(self, message, step=None, sample=None):
        super().__init__(message)
        self.step = step
        self.sample = sample


class StiffnessError(BNSError, ArithmeticError):
    """Adaptive step size collapsed below the minimum."""


class ConfigError(BNSError, ValueError):
    """Malformed run configuration or parameter file."""
