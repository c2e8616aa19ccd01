"""Scalarization controllers.

Each controller turns per-objective rewards (or per-objective gradients) into a
single training signal and updates its own state.  The pure ``*_step``
functions implement a single state transition; the controller classes wrap
them behind one interface used by the training loops.

Score controllers (linear, ctwa, tchebycheff, lagrangian) emit per-completion
scalar scores or advantages.  Gradient controllers (mgda, gradnorm) combine
per-objective gradients.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

GRADNORM_LOSS_FLOOR = 1e-8


class InvalidBatch(ValueError):
    pass


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def linear_score(weights, rewards_row) -> float | np.ndarray:
    """Weighted sum ``sum_m lambda_m r_m``; ``rewards_row`` may be (..., M)."""
    w = _vec(weights)
    if np.any(w < 0):
        raise InvalidBatch("linear weights must be nonnegative")
    return np.asarray(rewards_row, dtype=float) @ w


# ---------------------------------------------------------------------------
# CTWA
# ---------------------------------------------------------------------------


@dataclass
class CtwaState:
    u: np.ndarray
    ema: np.ndarray
    targets: np.ndarray
    ema_rate: float = 0.1
    weight_lr: float = 0.05
    last_deficit: np.ndarray | None = None

    @classmethod
    def create(cls, init_weights, targets, ema_rate=0.1, weight_lr=0.05, ema_init=None):
        lam = _vec(init_weights)
        if np.any(lam <= 0):
            raise InvalidBatch("CTWA weights must be strictly positive")
        targets = _vec(targets)
        if targets.shape != lam.shape:
            raise InvalidBatch("one covariance target per objective is required")
        if not 0 < ema_rate <= 1:
            raise InvalidBatch("ema_rate must lie in (0, 1]")
        if not weight_lr > 0:
            raise InvalidBatch("weight_lr must be positive")
        ema = np.zeros_like(lam) if ema_init is None else _vec(ema_init).copy()
        return cls(np.log(lam), ema, targets, float(ema_rate), float(weight_lr))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.u)


def ctwa_step(state: CtwaState, batch_covariances) -> CtwaState:
    """EMA, deficit, log-weight ascent, in that order.  Returns a new state."""
    c = _vec(batch_covariances)
    if not np.all(np.isfinite(c)):
        raise InvalidBatch("CTWA covariances must be finite")
    tau = state.ema_rate
    ema = (1 - tau) * state.ema + tau * c
    deficit = np.maximum(state.targets - ema, 0.0)
    u = state.u + state.weight_lr * deficit
    return CtwaState(u, ema, state.targets, tau, state.weight_lr, deficit)


def ctwa_batch_covariance(group_rewards, completion_weights) -> np.ndarray:
    """Within-prompt sample covariance (divisor K - 1) averaged over prompts.

    Args:
        group_rewards: (B, K, M) rewards of each sampled completion, or (K, M)
            for a single prompt.
        completion_weights: (B, K) token-averaged clipped weights, or (K,).

    Returns:
        (M,) covariance per objective.
    """
    r = np.asarray(group_rewards, dtype=float)
    w = np.asarray(completion_weights, dtype=float)
    if r.ndim == 2:
        r, w = r[None], w[None]
    if r.ndim != 3 or w.shape != r.shape[:2]:
        raise InvalidBatch(f"shape mismatch: rewards {r.shape}, weights {w.shape}")
    K = r.shape[1]
    if K < 2:
        raise InvalidBatch("sample covariance needs K >= 2")
    rc = r - r.mean(axis=1, keepdims=True)
    wc = w - w.mean(axis=1, keepdims=True)
    cov = np.einsum("bkm,bk->bm", rc, wc) / (K - 1)
    return cov.mean(axis=0)


# ---------------------------------------------------------------------------
# weighted Tchebycheff
# ---------------------------------------------------------------------------


@dataclass
class TchebycheffState:
    weights: np.ndarray
    reference: np.ndarray | None = None


def tchebycheff_step(state: TchebycheffState, batch_rewards):
    """Raise the reference point to the batch maximum, then score the batch.

    Args:
        state: current weights and running reference point (None before the
            first batch).
        batch_rewards: (n, M) rewards.

    Returns:
        ``(scores, new_state)`` where ``scores = -max_m w_m (z_m - r_m) <= 0``.
    """
    r = np.atleast_2d(np.asarray(batch_rewards, dtype=float))
    w = _vec(state.weights)
    batch_max = r.max(axis=0)
    z = batch_max if state.reference is None else np.maximum(state.reference, batch_max)
    scores = -np.max(w * (z - r), axis=1)
    return scores, TchebycheffState(w, z)


# ---------------------------------------------------------------------------
# Lagrangian primal-dual
# ---------------------------------------------------------------------------


@dataclass
class LagrangianState:
    multipliers: np.ndarray
    targets: np.ndarray
    dual_lr: float = 0.01
    primary: int = 0

    @classmethod
    def create(cls, targets, dual_lr=0.01, primary=0, multipliers=None):
        targets = _vec(targets)
        lam = np.zeros_like(targets) if multipliers is None else _vec(multipliers).copy()
        if np.any(lam < 0):
            raise InvalidBatch("multipliers must be nonnegative")
        if not dual_lr > 0:
            raise InvalidBatch("dual_lr must be positive")
        return cls(lam, targets, float(dual_lr), int(primary))

    def constraint_indices(self, num_objectives: int) -> list[int]:
        return [m for m in range(num_objectives) if m != self.primary]

    def weight_vector(self, num_objectives: int) -> np.ndarray:
        """Full per-objective weight (1 on the primary, multipliers elsewhere)."""
        w = np.zeros(num_objectives)
        w[self.primary] = 1.0
        w[self.constraint_indices(num_objectives)] = self.multipliers
        return w


def lagrangian_dual_update(state: LagrangianState, constraint_expectations) -> LagrangianState:
    gap = state.targets - _vec(constraint_expectations)
    lam = np.maximum(0.0, state.multipliers + state.dual_lr * gap)
    return LagrangianState(lam, state.targets, state.dual_lr, state.primary)


def lagrangian_step(state: LagrangianState, advantages, constraint_expectations):
    """Dual ascent on the multipliers, then combine advantages.

    Args:
        state: current multipliers.
        advantages: (..., M) per-objective advantages (primary included).
        constraint_expectations: exact E[r_k] for the constraint objectives.

    Returns:
        ``(combined_advantage, new_state)``.
    """
    new = lagrangian_dual_update(state, constraint_expectations)
    A = np.asarray(advantages, dtype=float)
    combined = A @ new.weight_vector(A.shape[-1])
    return combined, new


# ---------------------------------------------------------------------------
# GradNorm
# ---------------------------------------------------------------------------


@dataclass
class GradNormState:
    weights: np.ndarray
    alpha: float = 1.5
    weight_lr: float = 0.025
    reference_losses: np.ndarray | None = None
    last_targets: np.ndarray | None = None

    @classmethod
    def create(cls, num_objectives: int, alpha=1.5, weight_lr=0.025):
        return cls(np.ones(num_objectives), float(alpha), float(weight_lr))


def gradnorm_step(state: GradNormState, losses, gradients):
    """One GradNorm weight update followed by gradient combination.

    Returns ``(combined_gradient, new_state)``; the combination uses the
    updated, renormalized weights.
    """
    L = _vec(losses)
    g = np.atleast_2d(np.asarray(gradients, dtype=float))
    M = len(state.weights)
    if g.shape[0] != M or L.shape != (M,):
        raise InvalidBatch("need one loss and one gradient per objective")
    ref = state.reference_losses
    if ref is None:
        ref = L.copy()
        if np.any(np.abs(ref) < GRADNORM_LOSS_FLOOR):
            warnings.warn("GradNorm reference loss at zero; using the floor", RuntimeWarning, stacklevel=2)
            ref = np.where(np.abs(ref) < GRADNORM_LOSS_FLOOR, GRADNORM_LOSS_FLOOR, ref)
    G = np.linalg.norm(g, axis=1)
    ratio = L / ref
    mean_ratio = ratio.mean()
    rel = ratio / mean_ratio if mean_ratio != 0 else np.ones(M)
    rel = np.maximum(rel, 0.0)
    scaled = state.weights * G
    targets = scaled.mean() * rel**state.alpha
    w = state.weights - state.weight_lr * np.sign(scaled - targets)
    w = np.maximum(w, 1e-8)
    w = w * M / w.sum()
    new = GradNormState(w, state.alpha, state.weight_lr, ref, targets)
    return w @ g, new


# ---------------------------------------------------------------------------
# MGDA
# ---------------------------------------------------------------------------


def _two_point(g1, g2):
    diff = g1 - g2
    denom = diff @ diff
    if denom == 0:
        return np.array([0.5, 0.5])
    a = float(np.clip((g2 - g1) @ g2 / denom, 0.0, 1.0))
    return np.array([a, 1 - a])


def mgda_minnorm(gradients, max_iter: int = 10_000, tol: float = 1e-10) -> np.ndarray:
    """Simplex weights minimizing ``||sum_m w_m g_m||``.

    Closed form for two gradients; otherwise Frank-Wolfe on the Gram matrix
    with exact line search, followed by an exact solve on the active support.
    """
    g = np.atleast_2d(np.asarray(gradients, dtype=float))
    if not np.all(np.isfinite(g)):
        raise InvalidBatch("gradients must be finite")
    M = g.shape[0]
    if M == 1:
        return np.ones(1)
    if M == 2:
        return _two_point(g[0], g[1])
    gram = g @ g.T
    w = np.full(M, 1.0 / M)
    for _ in range(max_iter):
        grad = gram @ w
        j = int(np.argmin(grad))
        gap = float(w @ grad - grad[j])
        if gap <= tol:
            break
        d = -w.copy()
        d[j] += 1.0
        curv = d @ gram @ d
        if curv <= 0:
            break
        step = min(1.0, gap / curv)
        w = w + step * d
    return _polish(gram, w)


def _affine_minnorm(sub):
    """Min of w^T G w subject to sum(w) = 1 via the KKT system (handles singular G)."""
    n = len(sub)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = sub
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n]


def _is_kkt(gram, w, value, tol=1e-12):
    return bool(np.all(gram @ w >= value - tol * max(1.0, abs(value))))


def _polish(gram, w, exhaustive_max=10):
    """Replace the Frank-Wolfe iterate by an exact active-set solution when one beats it."""
    best, best_val = w, float(w @ gram @ w)
    M = len(w)
    supports = [np.flatnonzero(w > 1e-9 * w.max())]
    if M <= exhaustive_max:
        supports += [np.array(c) for r in range(1, M + 1) for c in itertools.combinations(range(M), r)]
    for S in supports:
        x = _affine_minnorm(gram[np.ix_(S, S)])
        if np.any(x < -1e-14):
            continue
        cand = np.zeros(M)
        cand[S] = np.maximum(x, 0.0)
        cand /= cand.sum()
        val = float(cand @ gram @ cand)
        if val <= best_val and _is_kkt(gram, cand, val):
            best, best_val = cand, val
    return best


# ---------------------------------------------------------------------------
# controller objects
# ---------------------------------------------------------------------------


@dataclass
class Controller:
    """Base class; ``kind`` is "score" or "gradient"."""

    num_objectives: int
    kind: str = field(default="score", init=False)
    tag: str = field(default="", init=False)

    def weights(self) -> np.ndarray:
        raise NotImplementedError

    def begin(self, expected_rewards) -> None:
        """Called once per iteration with the exact expected rewards."""

    def scores(self, rewards) -> np.ndarray:
        """Per-completion scalar scores for a (..., M) reward array."""
        raise NotImplementedError

    def combine_advantages(self, per_objective_advantages) -> np.ndarray:
        raise NotImplementedError

    def observe_covariances(self, covariances) -> None:
        """Post-update covariance feedback (used by CTWA only)."""

    def combine_gradients(self, losses, gradients) -> np.ndarray:
        raise NotImplementedError

    @property
    def advantage_level(self) -> bool:
        """True when the controller mixes per-objective advantages."""
        return False


@dataclass
class LinearController(Controller):
    fixed: np.ndarray = None

    def __post_init__(self):
        self.kind, self.tag = "score", "linear"
        self.fixed = _vec(self.fixed)

    def weights(self):
        return self.fixed.copy()

    def scores(self, rewards):
        return linear_score(self.fixed, rewards)


@dataclass
class CtwaController(Controller):
    state: CtwaState = None

    def __post_init__(self):
        self.kind, self.tag = "score", "ctwa"

    def weights(self):
        return self.state.weights

    def scores(self, rewards):
        return linear_score(self.state.weights, rewards)

    def observe_covariances(self, covariances):
        self.state = ctwa_step(self.state, covariances)


@dataclass
class TchebycheffController(Controller):
    state: TchebycheffState = None

    def __post_init__(self):
        self.kind, self.tag = "score", "tchebycheff"

    def weights(self):
        return _vec(self.state.weights).copy()

    def scores(self, rewards):
        r = np.asarray(rewards, dtype=float)
        flat = r.reshape(-1, r.shape[-1])
        s, self.state = tchebycheff_step(self.state, flat)
        return s.reshape(r.shape[:-1])


@dataclass
class LagrangianController(Controller):
    state: LagrangianState = None

    def __post_init__(self):
        self.kind, self.tag = "score", "lagrangian"
        if len(self.state.multipliers) != self.num_objectives - 1:
            raise InvalidBatch("need one constraint target per non-primary objective")

    def weights(self):
        return self.state.weight_vector(self.num_objectives)

    def begin(self, expected_rewards):
        idx = self.state.constraint_indices(self.num_objectives)
        self.state = lagrangian_dual_update(self.state, _vec(expected_rewards)[idx])

    @property
    def advantage_level(self):
        return True

    def scores(self, rewards):
        # REINFORCE analogue of the combined advantage: the same weights on raw rewards
        return np.asarray(rewards, dtype=float) @ self.weights()

    def combine_advantages(self, per_objective_advantages):
        return np.asarray(per_objective_advantages, dtype=float) @ self.weights()


@dataclass
class MgdaController(Controller):
    last: np.ndarray | None = None

    def __post_init__(self):
        self.kind, self.tag = "gradient", "mgda"
        self.last = np.full(self.num_objectives, 1.0 / self.num_objectives)

    def weights(self):
        return self.last.copy()

    def combine_gradients(self, losses, gradients):
        self.last = mgda_minnorm(gradients)
        return self.last @ np.atleast_2d(gradients)


@dataclass
class GradNormController(Controller):
    state: GradNormState = None

    def __post_init__(self):
        self.kind, self.tag = "gradient", "gradnorm"

    def weights(self):
        return self.state.weights.copy()

    def combine_gradients(self, losses, gradients):
        combined, self.state = gradnorm_step(self.state, losses, gradients)
        return combined


def make_controller(tag: str, num_objectives: int, params: dict | None = None) -> Controller:
    """Build a controller from its tag and hyperparameters."""
    p = dict(params or {})
    M = num_objectives
    uniform = np.full(M, 1.0 / M)
    if tag == "linear":
        return LinearController(M, fixed=_vec(p.get("weights", uniform)))
    if tag == "ctwa":
        state = CtwaState.create(
            p.get("init_weights", uniform),
            p["targets"],
            ema_rate=p.get("ema_rate", 0.1),
            weight_lr=p.get("weight_lr", 0.05),
        )
        return CtwaController(M, state=state)
    if tag == "tchebycheff":
        return TchebycheffController(M, state=TchebycheffState(_vec(p.get("weights", uniform))))
    if tag == "lagrangian":
        state = LagrangianState.create(
            p["targets"], dual_lr=p.get("dual_lr", 0.01), primary=p.get("primary", 0)
        )
        return LagrangianController(M, state=state)
    if tag == "mgda":
        return MgdaController(M)
    if tag == "gradnorm":
        return GradNormController(
            M, state=GradNormState.create(M, p.get("alpha", 1.5), p.get("weight_lr", 0.025))
        )
    raise ValueError(f"unknown controller {tag!r}")


CONTROLLER_TAGS = ("linear", "ctwa", "tchebycheff", "lagrangian", "mgda", "gradnorm")
