"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid input data or configuration."""


class InvariantViolation(RuntimeError):
    """An internal consistency check failed during a run."""


class SolverError(RuntimeError):
    """The LP core could not produce a certified optimum.

    ``residual`` carries the worst violation found by the certificate check.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class AccreditationUndefined(RuntimeError):
    """Perfect-capacity MRI is zero, so rMRI has no reference."""
