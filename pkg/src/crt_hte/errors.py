"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when input data violate a structural invariant."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative fit fails and no fallback applies."""
