"""Exactly verifiable multi-objective scalarized policy optimization on tabular softmax policies."""

from .core import (
    ConfigurationError,
    EnvSpec,
    RewardTable,
    TabularPolicy,
    completion_dist,
    expected_reward,
    expected_rewards,
    sample_completion,
    value,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "EnvSpec",
    "RewardTable",
    "TabularPolicy",
    "completion_dist",
    "expected_reward",
    "expected_rewards",
    "sample_completion",
    "value",
]
