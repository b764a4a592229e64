"""Exception hierarchy shared by the fitting routines and the CLI."""


class CureFitError(Exception):
    """Base class for all errors raised by curefit."""


class DataValidationError(CureFitError, ValueError):
    """Input rows violate the cohort invariants.

    ``row`` is the 1-based data row number when the failure is tied to a
    single record, otherwise ``None``.
    """

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class SolverError(CureFitError):
    """An inner maximizer (logistic or Cox) could not produce a solution."""


class MaxIterError(SolverError):
    pass


class SeparationError(SolverError):
    """Logistic objective is unbounded (perfect or quasi-complete separation)."""


class NonConcaveStepError(SolverError):
    """Newton step failed to ascend even after ridge regularization."""


class SingularHessianError(NonConcaveStepError):
    """Hessian is singular, typically because a covariate has no variation."""


class ZeroRiskError(SolverError):
    """An event time carries event mass but no risk mass."""


class GhostMassOverflowError(CureFitError):
    """Truncated-copy probability reached 1, so the geometric count is undefined."""


class SingularInformationError(CureFitError):
    """Observed information matrix could not be inverted."""


class CalibrationError(CureFitError):
    """Simulation bounds cannot reach the requested truncation/censoring rate."""
