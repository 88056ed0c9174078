"""Survey-weighted supervised latent class models with probit outcomes."""

from .core import (
    McmcConfig,
    ModelParams,
    NumericalError,
    PriorSpec,
    SurveyDataset,
    ValidationError,
    normalize_weights,
    read_survey_csv,
    write_survey_csv,
)
from .estimators import SOLCA, SWOLCA, WOLCA

__version__ = "0.1.0"

__all__ = [
    "McmcConfig",
    "ModelParams",
    "NumericalError",
    "PriorSpec",
    "SOLCA",
    "SWOLCA",
    "SurveyDataset",
    "ValidationError",
    "WOLCA",
    "normalize_weights",
    "read_survey_csv",
    "write_survey_csv",
]
