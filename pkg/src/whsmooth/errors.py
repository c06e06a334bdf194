"""Exception hierarchy shared by all whsmooth modules."""


class SmoothingError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(SmoothingError, ValueError):
    """A parameter violates its contract (bad order, negative lambda, bad bounds...)."""


class UndefinedPdetError(SmoothingError, ValueError):
    """Log-pseudo-determinant requested for an all-zero penalty."""


class DataInconsistencyError(SmoothingError, ValueError):
    """Aggregated data is internally inconsistent (events without exposure)."""


class SingularSystemError(SmoothingError):
    """A symmetric system that should be positive definite is not."""


class NumericalError(SmoothingError):
    """A computation hit a numerical failure (divide by near-zero, non-finite result)."""


class ConvergenceError(SmoothingError):
    """An iterative solver failed to converge.

    Carries the objective trace so callers can diagnose the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class SelectionError(SmoothingError):
    """Smoothing-parameter selection could not find a finite objective value."""
