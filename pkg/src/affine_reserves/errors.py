"""Exception types shared across the package."""


class AffineReservesError(Exception):
    """Base class for all package errors."""


class ValidationError(AffineReservesError):
    """Bad input data: dimension mismatch, out-of-range parameter, schema violation."""

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class InfeasibleModelError(AffineReservesError):
    """The model is infeasible, either by construction or as reported by the solver.

    `block` names the constraint block implicated, when known.
    """

    def __init__(self, message, block=None):
        self.block = block
        if block is not None:
            message = f"{message} (block: {block})"
        super().__init__(message)


class SolverToleranceError(AffineReservesError):
    """A solution audit failed beyond the accepted tolerance."""

    def __init__(self, message, block=None, violation=None):
        self.block = block
        self.violation = violation
        super().__init__(message)


class NumericalError(AffineReservesError):
    """The solver failed for numerical reasons; carries a diagnostic report."""

    def __init__(self, message, report=None):
        self.report = report or {}
        super().__init__(message)
