"""Closed-form two-mode model.

Two completions: a "good" mode preferred by the objective and a "bad" mode
that the scalar score may prefer.  ``p`` is the probability of the bad mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TwoModeConfig:
    p0: float = 0.5
    s_good: float = 0.0
    s_bad: float = 1.0
    r_good: float = 1.0
    r_bad: float = 0.0
    eta: float = 0.1
    steps: int = 200

    def __post_init__(self):
        if not 0.0 < self.p0 < 1.0:
            raise ValueError(f"p0 must lie strictly inside (0, 1), got {self.p0}")
        for name in ("s_good", "s_bad", "r_good", "r_bad", "eta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a nonnegative integer")


def _logit(p):
    return math.log(p) - math.log1p(-p)


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def one_step(p: float, cfg: TwoModeConfig) -> float:
    """p e^{eta s_bad} / (p e^{eta s_bad} + (1 - p) e^{eta s_good})."""
    return _sigmoid(_logit(p) + cfg.eta * (cfg.s_bad - cfg.s_good))


def log_odds_trajectory(cfg: TwoModeConfig) -> np.ndarray:
    """(steps + 1,) bad-mode probabilities p_0..p_T.

    The log-odds move by the constant ``eta (s_bad - s_good)`` each step, so
    ``logit(p_t) = logit(p_0) + t * eta * (s_bad - s_good)`` exactly.
    """
    z0 = _logit(cfg.p0)
    drift = cfg.eta * (cfg.s_bad - cfg.s_good)
    return np.array([_sigmoid(z0 + t * drift) for t in range(cfg.steps + 1)])


def expected_objective(cfg: TwoModeConfig, p) -> np.ndarray | float:
    """r_good - p (r_good - r_bad)."""
    return cfg.r_good - np.asarray(p, dtype=float) * (cfg.r_good - cfg.r_bad)


def closed_form_covariance(cfg: TwoModeConfig, p) -> np.ndarray | float:
    """Covariance of r and s when the bad mode has probability ``p``."""
    p = np.asarray(p, dtype=float)
    return p * (1 - p) * (cfg.r_good - cfg.r_bad) * (cfg.s_good - cfg.s_bad)


def trajectory_table(cfg: TwoModeConfig) -> dict[str, np.ndarray]:
    p = log_odds_trajectory(cfg)
    return {
        "t": np.arange(len(p)),
        "p_t": p,
        "expected_r": expected_objective(cfg, p),
        "covariance": closed_form_covariance(cfg, p),
    }
