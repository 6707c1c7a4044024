"""Conditional diffusion and flow-matching fusion of nighttime-light rasters."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    EvaluationError,
    FormatError,
    NightfuseError,
    NumericError,
    ParameterError,
    ShapeError,
    SpecError,
    StageError,
    UnitsError,
    VerificationError,
)
from .raster import Grid, Units

__all__ = [
    "__version__",
    "Grid",
    "Units",
    "NightfuseError",
    "ConfigError",
    "EvaluationError",
    "FormatError",
    "NumericError",
    "ParameterError",
    "ShapeError",
    "SpecError",
    "StageError",
    "UnitsError",
    "VerificationError",
]
