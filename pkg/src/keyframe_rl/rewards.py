"""Trajectory rewards and advantage estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import SimilarityMatrix

ACC_REWARD = 0.8
FORMAT_REWARD = 0.1
INFO_REWARD = 0.1


@dataclass(frozen=True)
class RewardBreakdown:
    acc: float
    format: float
    info: float

    @property
    def total(self) -> float:
        return self.acc + self.format + self.info


def informativeness_reward(S: SimilarityMatrix | np.ndarray, tau_info: float = 10.0) -> float:
    """0.1 times the share of query rows whose max/min ratio strictly exceeds ``tau_info``."""
    values = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("need a non-empty 2D similarity grid")
    if np.any(values <= 0):
        raise ValueError("informativeness needs strictly positive similarities")
    ratios = values.max(axis=1) / values.min(axis=1)
    return INFO_REWARD * int(np.count_nonzero(ratios > tau_info)) / values.shape[0]


def compute_rewards(correct: bool, well_formed: bool, S: SimilarityMatrix | None, tau_info: float = 10.0) -> RewardBreakdown:
    """Reward parts for one trajectory. A malformed response earns no informativeness."""
    info = informativeness_reward(S, tau_info) if (well_formed and S is not None) else 0.0
    return RewardBreakdown(ACC_REWARD if correct else 0.0, FORMAT_REWARD if well_formed else 0.0, info)


def group_advantages(rewards, eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / std with the population std; a flat group gets all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("group advantages need at least two rewards")
    std = r.std()
    if std < eps:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass(frozen=True)
class DifficultyAdvantageConfig:
    zero_pass_bonus: float = 10.0
    zero_pass_penalty: float = 0.0


def difficulty_advantage(c: float, correct: bool, config: DifficultyAdvantageConfig = DifficultyAdvantageConfig()) -> float:
    """Pre-training advantage scaled by question difficulty (pass rate ``c``).

    Never-solved questions (``c == 0``) pay a large bonus on success and
    nothing on failure; otherwise success pays ``1/c`` and failure costs
    ``1/(1-c)``.
    """
    if c < 0:
        raise ValueError("pass rate must be non-negative")
    if c >= 1:
        raise ValueError("all-pass questions (c = 1) must be filtered out before training")
    if c == 0:
        return config.zero_pass_bonus if correct else 0.0 - config.zero_pass_penalty
    return 1.0 / c if correct else -1.0 / (1.0 - c)
