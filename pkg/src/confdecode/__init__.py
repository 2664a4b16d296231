"""Confidence-aware selective classification with calibrated deep ensembles."""

from .errors import (ConfDecodeError, FormatError, InsufficientData, InvalidConfig, InvalidCurve, InvalidLogits,
                     InvalidProbability, InvalidShape, NumericalError, StageError, TrainingError,
                     UnknownOperatingPoint)

__version__ = "0.1.0"
