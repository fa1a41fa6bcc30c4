"""Deterministic federated learning simulator with two-head personalization."""

from .errors import (AggregationError, ConfigurationError, DomainError,
                     FedSimError, FormatError, NumericError)
from .params import ParamVector, load_params, save_params

__version__ = "0.1.0"

__all__ = [
    "AggregationError", "ConfigurationError", "DomainError", "FedSimError",
    "FormatError", "NumericError", "ParamVector", "load_params", "save_params",
    "__version__",
]
