"""Few-shot video anomaly detection with dynamic prototypes and a meta-learned
prototype unit, on a numpy autodiff core."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    EvaluationError,
    FormatError,
    NDVADError,
    NumericError,
    StageError,
)

__version__ = "0.1.0"
