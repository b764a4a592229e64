"""Mixture cure-rate models for left-truncated, right-censored data with an
observable cure horizon."""

__version__ = "0.1.0"

from .em import EMConfig, FitResult, fit_em
from .estimator import CureRateModel, LeftTruncatedKaplanMeier, make_survival_target
from .exceptions import (CalibrationError, CureFitError, DataValidationError,
                         GhostMassOverflowError, SeparationError,
                         SingularInformationError, SolverError)
from .io import read_cohort_csv
from .model import Dataset, ModelParams, Status, build_dataset
from .simulate import SimConfig, gen_trial, run_study
from .survfit import KMCurve, kaplan_meier, km_left_truncated
from .variance import louis_information, wald_test

__all__ = [
    "__version__",
    "CureRateModel",
    "LeftTruncatedKaplanMeier",
    "make_survival_target",
    "EMConfig",
    "FitResult",
    "fit_em",
    "Dataset",
    "ModelParams",
    "Status",
    "build_dataset",
    "read_cohort_csv",
    "SimConfig",
    "gen_trial",
    "run_study",
    "KMCurve",
    "kaplan_meier",
    "km_left_truncated",
    "louis_information",
    "wald_test",
    "CureFitError",
    "DataValidationError",
    "SolverError",
    "SeparationError",
    "GhostMassOverflowError",
    "SingularInformationError",
    "CalibrationError",
]
