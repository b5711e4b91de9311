"""Bandit algorithms that warm-start from historical data lazily.

The package provides monotone UCB base algorithms, the Ignorant / Full Start /
Artificial Replay data-incorporation wrappers, discretization algorithms for
continuous combinatorial allocation, and an experiment harness.
"""

from artreplay.algorithms import CombMonUCB, MonUCB, PsiSpec, ThompsonSampling
from artreplay.cmab import AdaptiveDiscretization, CMABEnv, FixedDiscretization, cmab_opt
from artreplay.history import HistoricalDataset, SpatialHistory
from artreplay.meta import (
    CombFiniteEnv,
    KArmedEnv,
    artificial_replay_step,
    full_start_init,
    ignorant_step,
    run_policy,
    verify_coupling,
)
from artreplay.model import (
    ConfigError,
    IngestionError,
    InstanceMismatchError,
    InvariantViolation,
    KArmedInstance,
    RegretLedger,
    RewardStack,
    ValidationError,
)

__all__ = [
    "AdaptiveDiscretization",
    "CMABEnv",
    "CombFiniteEnv",
    "FixedDiscretization",
    "KArmedEnv",
    "cmab_opt",
    "CombMonUCB",
    "ConfigError",
    "HistoricalDataset",
    "IngestionError",
    "InstanceMismatchError",
    "InvariantViolation",
    "KArmedInstance",
    "MonUCB",
    "PsiSpec",
    "RegretLedger",
    "RewardStack",
    "SpatialHistory",
    "ThompsonSampling",
    "ValidationError",
    "artificial_replay_step",
    "full_start_init",
    "ignorant_step",
    "run_policy",
    "verify_coupling",
]
