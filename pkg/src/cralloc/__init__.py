"""Multi-phase computation-resource allocation with constraint-calibrated Q-learning."""

from .core import ActionSpaceSpec, BudgetSpec, ConfigError, LambdaVector, RewardWeights
from .simenv import EnvConfig, RequestSet, SimEnv, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "ActionSpaceSpec",
    "BudgetSpec",
    "ConfigError",
    "EnvConfig",
    "LambdaVector",
    "RequestSet",
    "RewardWeights",
    "SimEnv",
    "generate_dataset",
]
