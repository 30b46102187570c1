"""Exception types shared across the package."""


class SpatcatError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SpatcatError, ValueError):
    """Raised when user-facing inputs violate a documented precondition."""


class SingularMatrixError(SpatcatError):
    """Raised when a required Cholesky factorization fails after retries."""


class ChainAbortError(SpatcatError):
    """Raised when a sampler block fails irrecoverably mid-run."""
