"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad run configuration (grids, missing blocks, malformed files)."""


class ModelValidationError(ValueError):
    """Probability-model invariants violated (intensities, bounds, weights)."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConjugateError(RuntimeError):
    """Numeric conjugate evaluation failed to converge.

    Carries the last iterate so callers can inspect where the search stopped.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class NonAttainedError(RuntimeError):
    """Supremum in a conjugate / argmax problem is not attained."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class RegressionError(RuntimeError):
    """Least-squares regression failed even after basis reduction."""


class PreconditionError(ValueError):
    """A check was called on inputs violating its stated precondition."""
