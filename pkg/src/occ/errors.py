"""Exception types shared across the toolkit."""


class OccError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(OccError, ValueError):
    """Malformed or out-of-range input."""


class NoConvergenceError(OccError, RuntimeError):
    """An iterative solver failed; carries the last residual when known."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SaddlePointError(OccError, RuntimeError):
    """Target violates the saddle-point property (defect != 0)."""

    def __init__(self, message, defect=None):
        super().__init__(message)
        self.defect = defect


class DegenerateOrbitError(OccError, RuntimeError):
    """A periodic solve collapsed to a steady state."""


class DomainError(OccError, ValueError):
    """Evaluation outside the admissible region (e.g. log of nonpositive control)."""


class FormatError(OccError, ValueError):
    """Persisted file is malformed, truncated, or has an unsupported version."""


class NoSkibaError(OccError, RuntimeError):
    """No value crossing bracket exists in the scanned range."""
