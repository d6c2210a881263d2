"""Safe model-based design of experiments with Gaussian-process mismatch models."""

__version__ = "0.1.0"

from .errors import (CampaignAborted, ConfigError, ConditioningError, DimensionError, EstimationError,
                     IntegrationError, NotFittedError, OptimizationError, SafeDoeError, StatisticsError)

__all__ = [
    "__version__",
    "CampaignAborted", "ConfigError", "ConditioningError", "DimensionError", "EstimationError",
    "IntegrationError", "NotFittedError", "OptimizationError", "SafeDoeError", "StatisticsError",
]
