"""Exact closed-form quantities on tabular softmax policies.

Everything here is computed by enumerating completions.  Gradients are with
respect to the flattened logit array of :class:`~mobandit.core.TabularPolicy`
and always include the ``1 / num_prompts`` factor of the uniform prompt
distribution, so they are gradients of the prompt-averaged quantities.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    TabularPolicy,
    RewardTable,
    all_completion_dists,
    completion_dist,
    expected_reward,
)

ADVANTAGE_STD_FLOOR = 1e-8
PINV_RELATIVE_THRESHOLD = 1e-10
DENSE_FEATURE_LIMIT = 20_000_000
GROUP_ENUMERATION_LIMIT = 200_000
MONTE_CARLO_GROUPS = 10_000


class InvalidInput(ValueError):
    pass


class AssumptionViolation(ValueError):
    """A required hypothesis fails on the instance (e.g. tied maximizer)."""


# ---------------------------------------------------------------------------
# distribution-space quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TiltResult:
    tilted: np.ndarray
    log_partition: float


def exponential_tilt(dist, scores, eta: float) -> TiltResult:
    """Exponentially tilt ``dist`` by ``exp(eta * scores)``.

    Zero-probability completions stay at zero.  ``log_partition`` is
    ``log E_dist[exp(eta * s)]``.
    """
    dist = np.asarray(dist, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if not np.isfinite(eta):
        raise InvalidInput(f"eta must be finite, got {eta}")
    if np.any(dist < 0) or not dist.sum() > 0:
        raise InvalidInput("distribution must be nonnegative with positive mass")
    support = dist > 0
    logw = np.full(dist.shape, -np.inf)
    logw[support] = np.log(dist[support]) + eta * scores[support]
    top = logw[support].max()
    log_z = top + math.log(np.exp(logw[support] - top).sum())
    tilted = np.zeros_like(dist)
    tilted[support] = np.exp(logw[support] - log_z)
    # normalisation relative to the input mass (dist may carry rounding error)
    return TiltResult(tilted, float(log_z - math.log(dist.sum())))


def reward_covariance(dist, a, b) -> float:
    """Exact covariance of ``a`` and ``b`` under ``dist``."""
    dist = np.asarray(dist, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mean_a = dist @ a
    mean_b = dist @ b
    return float(dist @ ((a - mean_a) * (b - mean_b)))


@dataclass(frozen=True)
class CovarianceLawCheck:
    actual: np.ndarray
    predicted: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return np.abs(self.actual - self.predicted)


def covariance_law_check(
    policy: TabularPolicy, rewards: RewardTable, scores, eta: float
) -> CovarianceLawCheck:
    """Compare the exact per-objective change under one tilt step with ``eta * E_x Cov``."""
    if not eta > 0:
        raise InvalidInput("eta must be positive")
    scores = np.asarray(scores, dtype=float)
    n_prompts = policy.env.num_prompts
    M = rewards.num_objectives
    actual = np.zeros(M)
    predicted = np.zeros(M)
    for x in range(n_prompts):
        p = completion_dist(policy, x)
        q = exponential_tilt(p, scores[x], eta).tilted
        r = rewards.values[x]
        # difference of expectations as one sum to avoid cancellation
        actual += (q - p) @ r
        for m in range(M):
            predicted[m] += eta * reward_covariance(p, r[:, m], scores[x])
    return CovarianceLawCheck(actual / n_prompts, predicted / n_prompts)


# ---------------------------------------------------------------------------
# parameter-space gradients
# ---------------------------------------------------------------------------


def grad_expectation(policy: TabularPolicy, table) -> np.ndarray:
    """Gradient of ``E_x E_y[table[x, y]]`` with the table held fixed.

    Uses the score-function identity; the per-prefix block receives
    ``sum_y p(y) t(y) (e_{y_l} - p(.|prefix))`` for every position ``l``.
    Returns an array shaped like ``policy.logits``.
    """
    env = policy.env
    table = np.asarray(table, dtype=float)
    grad = np.zeros_like(policy.logits)
    pre, tok = env.prefix_index, env.tokens
    for x in range(env.num_prompts):
        logp_tok = policy.token_log_probs(x)
        probs_tok = np.exp(logp_tok)
        p = np.exp(logp_tok[pre, tok].sum(axis=1))
        coef = p * table[x]
        block = grad[x]
        c = np.broadcast_to(coef[:, None], pre.shape)
        np.add.at(block, (pre.ravel(), tok.ravel()), c.ravel())
        mass = np.zeros(env.num_prefixes)
        np.add.at(mass, pre.ravel(), c.ravel())
        block -= mass[:, None] * probs_tok
    return grad / env.num_prompts


def policy_gradient_value(policy: TabularPolicy, scores) -> np.ndarray:
    """Exact gradient of V(theta) = E_x E_y[s(x, y)], flattened."""
    return grad_expectation(policy, scores).ravel()


def per_objective_gradients(policy: TabularPolicy, rewards: RewardTable) -> np.ndarray:
    """(M, n) matrix whose rows are the exact gradients of each expected reward."""
    return np.stack(
        [policy_gradient_value(policy, rewards.objective(m)) for m in range(rewards.num_objectives)]
    )


def gradient_cosines(gradients) -> np.ndarray:
    """Pairwise cosine matrix; rows/columns of zero vectors are NaN."""
    g = np.atleast_2d(np.asarray(gradients, dtype=float))
    norms = np.linalg.norm(g, axis=1)
    if not np.any(norms > 0):
        raise InvalidInput("at least one gradient must be nonzero")
    safe = np.where(norms > 0, norms, 1.0)
    unit = g / safe[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    zero = norms == 0
    cos[zero, :] = np.nan
    cos[:, zero] = np.nan
    np.fill_diagonal(cos, np.where(zero, np.nan, 1.0))
    return cos


def min_offdiag(cos: np.ndarray) -> float:
    if cos.shape[0] < 2:
        return 1.0
    mask = ~np.eye(cos.shape[0], dtype=bool)
    return float(np.min(cos[mask]))


def kl_divergence(policy: TabularPolicy, reference: TabularPolicy) -> float:
    """E_x KL(p_theta(.|x) || p_ref(.|x)) over completions."""
    total = 0.0
    for x in range(policy.env.num_prompts):
        logp = policy.completion_log_probs(x)
        logq = reference.completion_log_probs(x)
        total += float(np.exp(logp) @ (logp - logq))
    return total / policy.env.num_prompts


def kl_gradient(policy: TabularPolicy, reference: TabularPolicy) -> np.ndarray:
    table = np.stack(
        [
            policy.completion_log_probs(x) - reference.completion_log_probs(x)
            for x in range(policy.env.num_prompts)
        ]
    )
    return grad_expectation(policy, table).ravel()


def entropy(policy: TabularPolicy) -> float:
    """E_x H(p_theta(.|x)) over completions."""
    total = 0.0
    for x in range(policy.env.num_prompts):
        logp = policy.completion_log_probs(x)
        total -= float(np.exp(logp) @ logp)
    return total / policy.env.num_prompts


def entropy_gradient(policy: TabularPolicy) -> np.ndarray:
    table = np.stack([policy.completion_log_probs(x) for x in range(policy.env.num_prompts)])
    return -grad_expectation(policy, table).ravel()


def regularizer_gradient(
    policy: TabularPolicy, reference: TabularPolicy | None, beta_kl: float, lambda_ent: float
) -> np.ndarray:
    """R = beta * grad KL(p || p_ref) - lambda * grad H(p)."""
    out = np.zeros(policy.num_params)
    if beta_kl and reference is not None:
        out += beta_kl * kl_gradient(policy, reference)
    if lambda_ent:
        out -= lambda_ent * entropy_gradient(policy)
    return out


def token_features(policy: TabularPolicy, prompt: int) -> np.ndarray:
    """Dense (N, L, P*V) array of tokenwise log-prob gradients phi_l(x, y).

    Coordinates are those of ``policy.logits[prompt]`` flattened.
    """
    env = policy.env
    N, L, P, V = env.num_completions, env.out_len, env.num_prefixes, env.vocab_size
    if N * L * P * V > DENSE_FEATURE_LIMIT:
        raise InvalidInput(f"dense token features too large ({N}x{L}x{P * V})")
    probs = policy.token_probs(prompt)
    phi = np.zeros((N, L, P, V))
    n_idx, l_idx = np.meshgrid(np.arange(N), np.arange(L), indexing="ij")
    pre = env.prefix_index
    phi[n_idx, l_idx, pre, :] = -probs[pre]
    phi[n_idx, l_idx, pre, env.tokens] += 1.0
    return phi.reshape(N, L, P * V)


def prompt_slice(policy: TabularPolicy, prompt: int) -> slice:
    size = policy.env.num_prefixes * policy.env.vocab_size
    return slice(prompt * size, (prompt + 1) * size)


# ---------------------------------------------------------------------------
# GRPO group quantities and clipping
# ---------------------------------------------------------------------------


def grpo_advantages(scores, floor: float = ADVANTAGE_STD_FLOOR) -> np.ndarray:
    """Group-normalized advantages with population std and a degenerate-group rule."""
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size < 2:
        raise InvalidInput(f"a GRPO group needs K >= 2 scores, got {s.size}")
    if np.all(s == s[0]):
        return np.zeros_like(s)
    centered = s - s.mean()
    return centered / max(float(np.sqrt(np.mean(centered**2))), floor)


def unclipped_indicator(advantage, ratio, eps_clip: float):
    advantage = np.asarray(advantage, dtype=float)
    ratio = np.asarray(ratio, dtype=float)
    return np.where(advantage >= 0, ratio <= 1 + eps_clip, ratio >= 1 - eps_clip)


@dataclass(frozen=True)
class ClipState:
    ratio: float
    indicator: int
    clipped_weight: float
    advantage: float


def token_ratios(policy: TabularPolicy, old_policy: TabularPolicy, prompt: int, completions) -> np.ndarray:
    """(K, L) importance ratios p_theta(y_l|.) / p_old(y_l|.) for the given completions."""
    logp = policy.completion_token_log_probs(prompt)[completions]
    logq = old_policy.completion_token_log_probs(prompt)[completions]
    if np.any(np.isneginf(logq)):
        raise InvalidInput("old policy assigns zero probability to a sampled token")
    return np.exp(logp - logq)


def clip_arrays(policy, old_policy, prompt, completions, advantages, eps_clip):
    """Vectorized (ratio, indicator, W) arrays of shape (K, L)."""
    if not 0 < eps_clip < 1:
        raise InvalidInput(f"eps_clip must lie in (0, 1), got {eps_clip}")
    completions = np.atleast_1d(np.asarray(completions, dtype=np.int64))
    A = np.broadcast_to(np.asarray(advantages, dtype=float), completions.shape)
    rho = token_ratios(policy, old_policy, prompt, completions)
    ind = unclipped_indicator(A[:, None], rho, eps_clip)
    W = A[:, None] * rho * ind
    return rho, ind, W


def clip_state(policy, old_policy, prompt: int, completion: int, advantage: float, eps_clip: float) -> list[ClipState]:
    rho, ind, W = clip_arrays(policy, old_policy, prompt, [completion], [advantage], eps_clip)
    return [
        ClipState(float(r), int(i), float(w), float(advantage))
        for r, i, w in zip(rho[0], ind[0], W[0])
    ]


def completion_weight(clip_states) -> float:
    """Token-averaged clipped advantage weight of one completion."""
    weights = [c.clipped_weight if isinstance(c, ClipState) else float(c) for c in clip_states]
    if not weights:
        raise InvalidInput("need at least one token")
    return float(np.mean(weights))


def surrogate_gradient(policy, old_policy, prompt, completions, advantages, eps_clip) -> np.ndarray:
    """Gradient of sum_k sum_l min(rho A, clip(rho) A) for one group, shaped like ``logits[prompt]``.

    Each token contributes ``W_{k,l} (e_{y_l} - p_theta(.|prefix))`` to its prefix block.
    """
    env = policy.env
    completions = np.asarray(completions, dtype=np.int64)
    _, _, W = clip_arrays(policy, old_policy, prompt, completions, advantages, eps_clip)
    probs = policy.token_probs(prompt)
    pre = env.prefix_index[completions]
    tok = env.tokens[completions]
    grad = np.zeros((env.num_prefixes, env.vocab_size))
    np.add.at(grad, (pre.ravel(), tok.ravel()), W.ravel())
    mass = np.zeros(env.num_prefixes)
    np.add.at(mass, pre.ravel(), W.ravel())
    grad -= mass[:, None] * probs
    return grad


# ---------------------------------------------------------------------------
# Fisher matrices and natural gradients
# ---------------------------------------------------------------------------


def fisher_categorical(dist) -> np.ndarray:
    p = np.asarray(dist, dtype=float)
    return np.diag(p) - np.outer(p, p)


def fisher_aggregated(
    policy: TabularPolicy,
    prompt: int,
    group_size: int,
    old_policy: TabularPolicy | None = None,
    rng: np.random.Generator | None = None,
    num_groups: int = MONTE_CARLO_GROUPS,
) -> np.ndarray:
    """E[(sum_{k,l} phi_{k,l})(sum_{k,l} phi_{k,l})^T] over groups drawn from ``old_policy``.

    Features are evaluated at ``policy``.  With i.i.d. group members the
    expectation is ``K E[Phi Phi^T] + K (K - 1) E[Phi] E[Phi]^T`` with
    ``Phi(y) = sum_l phi_l(y)``, which is exact.  Passing ``rng`` switches to
    a Monte Carlo estimate over ``num_groups`` sampled groups instead.
    """
    old_policy = policy if old_policy is None else old_policy
    K = int(group_size)
    if K < 1:
        raise InvalidInput("group size must be positive")
    Phi = token_features(policy, prompt).sum(axis=1)
    q = completion_dist(old_policy, prompt)
    if rng is None:
        mean = q @ Phi
        second = (Phi * q[:, None]).T @ Phi
        F = K * second + K * (K - 1) * np.outer(mean, mean)
    else:
        cdf = np.cumsum(q)
        cdf[-1] = 1.0
        draws = np.searchsorted(cdf, rng.random((num_groups, K)), side="right")
        counts = np.zeros((num_groups, len(q)))
        np.add.at(counts, (np.repeat(np.arange(num_groups), K), draws.ravel()), 1.0)
        S = counts @ Phi
        F = S.T @ S / num_groups
    return 0.5 * (F + F.T)


def natural_gradient_flat(dist, weights) -> np.ndarray:
    """Sum-zero natural gradient ``w - E[w] 1`` of E[w] for a flat categorical."""
    p = np.asarray(dist, dtype=float)
    w = np.asarray(weights, dtype=float)
    d = w - p @ w
    F = fisher_categorical(p)
    target = p * d  # gradient of E[w] in flat logits
    if not np.allclose(F @ d, target, rtol=0, atol=1e-9 * max(1.0, np.abs(target).max())):
        raise ArithmeticError("natural gradient failed its Fisher consistency check")
    return d


@dataclass(frozen=True)
class NaturalGradient:
    direction: np.ndarray
    null_residual: float
    inconsistent: bool


def _range_eigh(F: np.ndarray, rel: float = PINV_RELATIVE_THRESHOLD):
    lam, U = np.linalg.eigh(0.5 * (F + F.T))
    top = lam.max() if lam.size else 0.0
    if top <= 0:
        return U[:, :0], lam[:0]
    keep = lam > rel * top
    return U[:, keep], lam[keep]


def natural_gradient_general(F, rhs, rel: float = PINV_RELATIVE_THRESHOLD) -> NaturalGradient:
    """Pseudo-inverse solve ``F d = rhs`` restricted to the range of ``F``."""
    F = np.asarray(F, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    U, lam = _range_eigh(F, rel)
    coeff = U.T @ rhs
    d = U @ (coeff / lam)
    null = rhs - U @ coeff
    null_norm = float(np.linalg.norm(null))
    inconsistent = null_norm > 1e-6 * float(np.linalg.norm(rhs))
    if inconsistent:
        warnings.warn(
            f"right-hand side has a null-space component of norm {null_norm:.3g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return NaturalGradient(d, null_norm, inconsistent)


def fisher_inverse_norm(F, v, rel: float = PINV_RELATIVE_THRESHOLD) -> float:
    """``||F^{-1/2} v||`` on the range of ``F``."""
    U, lam = _range_eigh(np.asarray(F, dtype=float), rel)
    c = U.T @ np.asarray(v, dtype=float)
    return float(np.sqrt(np.sum(c * c / lam)))


# ---------------------------------------------------------------------------
# exact expectations over GRPO groups
# ---------------------------------------------------------------------------


def compositions(n_bins: int, total: int) -> np.ndarray:
    """All count vectors of length ``n_bins`` summing to ``total`` (stars and bars)."""
    if n_bins == 1:
        return np.array([[total]])
    bars = np.array(list(itertools.combinations(range(total + n_bins - 1), n_bins - 1)))
    if bars.size == 0:
        bars = bars.reshape(0, n_bins - 1)
    edges = np.hstack(
        [np.full((len(bars), 1), -1), bars, np.full((len(bars), 1), total + n_bins - 1)]
    )
    return np.diff(edges, axis=1) - 1


def _group_advantages_from_counts(counts, scores, floor):
    """Advantage each completion would get in groups with the given counts."""
    K = counts.sum(axis=1, keepdims=True)
    mean = counts @ scores / K[:, 0]
    centered = scores[None, :] - mean[:, None]
    std = np.sqrt(np.sum(counts * centered**2, axis=1) / K[:, 0])
    occupied = counts > 0
    hi = np.where(occupied, scores[None, :], -np.inf).max(axis=1)
    lo = np.where(occupied, scores[None, :], np.inf).min(axis=1)
    A = centered / np.maximum(std, floor)[:, None]
    A[hi == lo] = 0.0
    return A


def group_advantage_moments(
    probs,
    scores,
    group_size: int,
    floor: float = ADVANTAGE_STD_FLOOR,
    rng: np.random.Generator | None = None,
    num_groups: int = MONTE_CARLO_GROUPS,
    limit: int = GROUP_ENUMERATION_LIMIT,
):
    """E[n_y A(y) 1{A(y) >= 0}] and E[n_y A(y) 1{A(y) < 0}] per completion ``y``.

    ``n_y`` is the number of copies of ``y`` in a group of ``group_size``
    i.i.d. draws from ``probs``.  Exact by enumerating group compositions when
    there are at most ``limit`` of them, otherwise Monte Carlo with ``rng``.
    Returns ``(pos, neg, exact)``.
    """
    p = np.asarray(probs, dtype=float)
    s = np.asarray(scores, dtype=float)
    N, K = len(p), int(group_size)
    if K < 2:
        raise InvalidInput("GRPO groups need K >= 2")
    if math.comb(N + K - 1, K) <= limit:
        counts = compositions(N, K).astype(float)
        log_fact = np.array([math.lgamma(i + 1) for i in range(K + 1)])
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        terms = np.where(counts > 0, counts * logp[None, :], 0.0)
        logw = log_fact[K] - log_fact[counts.astype(int)].sum(axis=1) + terms.sum(axis=1)
        weight = np.exp(logw)
        exact = True
    else:
        if rng is None:
            raise InvalidInput("group enumeration too large; pass an rng for Monte Carlo")
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        draws = np.searchsorted(cdf, rng.random((num_groups, K)), side="right")
        counts = np.zeros((num_groups, N))
        np.add.at(counts, (np.repeat(np.arange(num_groups), K), draws.ravel()), 1.0)
        weight = np.full(num_groups, 1.0 / num_groups)
        exact = False
    A = _group_advantages_from_counts(counts, s, floor)
    nA = counts * A
    pos = weight @ np.where(A >= 0, nA, 0.0)
    neg = weight @ np.where(A < 0, nA, 0.0)
    return pos, neg, exact


# ---------------------------------------------------------------------------
# first-order margins under clipping
# ---------------------------------------------------------------------------


@dataclass
class MarginReport:
    gamma: np.ndarray
    gamma_unclip: np.ndarray
    distortion: float
    fisher_grad_norm: np.ndarray
    sufficient: np.ndarray
    bound_holds: np.ndarray
    G_unclip: np.ndarray = field(repr=False)
    G_clip: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)
    fisher: np.ndarray = field(repr=False)
    exact: bool = True

    @property
    def bound_slack(self) -> np.ndarray:
        """gamma - (gamma_unclip - ||F^-1/2 grad r|| * distortion), nonnegative when the bound holds."""
        return self.gamma - (self.gamma_unclip - self.fisher_grad_norm * self.distortion)


def clipped_feature_means(
    policy: TabularPolicy,
    old_policy: TabularPolicy,
    scalar_scores,
    group_size: int,
    eps_clip: float,
    rng: np.random.Generator | None = None,
):
    """Exact G^unclip, G^clip and their difference (flattened) for groups drawn from ``old_policy``."""
    env = policy.env
    scores = np.asarray(scalar_scores, dtype=float)
    G_unclip = np.zeros(policy.num_params)
    removed = np.zeros(policy.num_params)
    exact = True
    for x in range(env.num_prompts):
        q = completion_dist(old_policy, x)
        pos, neg, ex = group_advantage_moments(q, scores[x], group_size, rng=rng)
        exact &= ex
        phi = token_features(policy, x)
        everything = np.arange(env.num_completions)
        rho = token_ratios(policy, old_policy, x, everything)
        ind_pos = unclipped_indicator(1.0, rho, eps_clip)
        ind_neg = unclipped_indicator(-1.0, rho, eps_clip)
        sl = prompt_slice(policy, x)
        G_unclip[sl] = np.einsum("y,yl,ylp->p", pos + neg, rho, phi)
        # build the clipped mass separately so it is exactly zero when nothing clips
        removed[sl] = np.einsum("y,yl,ylp->p", pos, rho * ~ind_pos, phi) + np.einsum(
            "y,yl,ylp->p", neg, rho * ~ind_neg, phi
        )
    G_unclip /= env.num_prompts
    removed /= env.num_prompts
    return G_unclip, G_unclip - removed, removed, exact


def aggregated_fisher_full(policy, old_policy, group_size) -> np.ndarray:
    """Block-diagonal prompt-averaged aggregated Fisher over all parameters."""
    env = policy.env
    F = np.zeros((policy.num_params, policy.num_params))
    for x in range(env.num_prompts):
        sl = prompt_slice(policy, x)
        F[sl, sl] = fisher_aggregated(policy, x, group_size, old_policy=old_policy)
    return F / env.num_prompts


def margins_and_distortion(
    policy: TabularPolicy,
    old_policy: TabularPolicy,
    rewards: RewardTable,
    scalar_scores,
    group_size: int,
    eps_clip: float,
    beta_kl: float = 0.0,
    lambda_ent: float = 0.0,
    reference: TabularPolicy | None = None,
    rng: np.random.Generator | None = None,
    tol: float = 1e-9,
) -> MarginReport:
    """First-order margins of every objective along the natural GRPO direction, with and without clipping."""
    reference = old_policy if reference is None else reference
    G_unclip, G_clip, removed, exact = clipped_feature_means(
        policy, old_policy, scalar_scores, group_size, eps_clip, rng=rng
    )
    R = regularizer_gradient(policy, reference, beta_kl, lambda_ent)
    F = aggregated_fisher_full(policy, old_policy, group_size)
    U, lam = _range_eigh(F)

    def finv(v):
        return U @ ((U.T @ v) / lam)

    def half_norm(v):
        c = U.T @ v
        return float(np.sqrt(np.sum(c * c / lam)))

    grads = per_objective_gradients(policy, rewards)
    d_clip = finv(G_clip - R)
    d_unclip = finv(G_unclip - R)
    gamma = grads @ d_clip
    gamma_unclip = grads @ d_unclip
    distortion = half_norm(removed)
    fnorm = np.array([half_norm(g) for g in grads])
    scale = 1.0 + np.abs(gamma_unclip) + fnorm * distortion
    bound_holds = gamma >= gamma_unclip - fnorm * distortion - tol * scale
    sufficient = (gamma_unclip > 0) & (fnorm * distortion <= gamma_unclip)
    return MarginReport(
        gamma=gamma,
        gamma_unclip=gamma_unclip,
        distortion=distortion,
        fisher_grad_norm=fnorm,
        sufficient=sufficient,
        bound_holds=bound_holds,
        G_unclip=G_unclip,
        G_clip=G_clip,
        R=R,
        fisher=F,
        exact=exact,
    )


def clipping_distortion(policy, old_policy, scalar_scores, group_size, eps_clip, rng=None) -> float:
    """Only the Fisher-weighted clipping distortion (cheaper than the full report)."""
    _, _, delta, _ = clipped_feature_means(
        policy, old_policy, scalar_scores, group_size, eps_clip, rng=rng
    )
    if not np.any(delta):
        return 0.0
    return fisher_inverse_norm(aggregated_fisher_full(policy, old_policy, group_size), delta)


# ---------------------------------------------------------------------------
# PL constant
# ---------------------------------------------------------------------------


def prefix_jacobian_singular_values(policy: TabularPolicy, prompt: int, prefixes) -> np.ndarray:
    """Nonzero singular values of the logit-selection Jacobians of the given prefix blocks."""
    env = policy.env
    V = env.vocab_size
    out = []
    base = prompt * env.num_prefixes * V
    for h in prefixes:
        J = np.zeros((V, policy.num_params))
        J[:, base + h * V : base + (h + 1) * V] = np.eye(V)
        sv = np.linalg.svd(J, compute_uv=False)
        out.append(sv[sv > 1e-12])
    return np.concatenate(out)


def token_contributions(policy: TabularPolicy, prompt: int, completion: int) -> np.ndarray:
    """(L, n) rows v_l = J_f^T (e_{y_l} - p(.|x, y_<l)) in full parameter coordinates."""
    env = policy.env
    V = env.vocab_size
    probs = policy.token_probs(prompt)
    base = prompt * env.num_prefixes * V
    v = np.zeros((env.out_len, policy.num_params))
    for l in range(env.out_len):
        h = env.prefix_index[completion, l]
        row = -probs[h].copy()
        row[env.tokens[completion, l]] += 1.0
        v[l, base + h * V : base + (h + 1) * V] = row
    return v


def alignment_constant(v: np.ndarray) -> float:
    """Minimum pairwise cosine among the nonzero rows of ``v`` (1 if fewer than two)."""
    norms = np.linalg.norm(v, axis=1)
    rows = v[norms > 0] / norms[norms > 0, None]
    if len(rows) < 2:
        return 1.0
    cos = rows @ rows.T
    return float(min(cos[i, j] for i in range(len(rows)) for j in range(i + 1, len(rows))))


def non_saturation_margin(policy: TabularPolicy, prompt: int) -> float:
    """1 - the largest next-token probability over every prefix of the prompt."""
    return float(1.0 - policy.token_probs(prompt).max())


@dataclass(frozen=True)
class TrajectoryBound:
    lhs: float
    rhs: float
    c_align: float

    @property
    def holds(self) -> bool:
        return self.lhs >= self.rhs - 1e-12 * max(1.0, self.rhs)


def trajectory_gradient_bound(policy: TabularPolicy, prompt: int, completion: int) -> TrajectoryBound:
    """Compare ``||sum_l v_l||^2`` with ``c L sigma_min^2 eps^2 N / (N - 1)`` using measured constants."""
    env = policy.env
    v = token_contributions(policy, prompt, completion)
    c = alignment_constant(v)
    sv = prefix_jacobian_singular_values(policy, prompt, env.prefix_index[completion])
    eps = non_saturation_margin(policy, prompt)
    N = env.num_completions
    rhs = max(c, 0.0) * env.out_len * sv.min() ** 2 * eps**2 * N / (N - 1)
    lhs = float(np.sum(v.sum(axis=0) ** 2))
    return TrajectoryBound(lhs, float(rhs), c)


@dataclass(frozen=True)
class PLReport:
    mu: float
    gamma_const: float
    p_star: float
    s_star: float
    sigma_min: float
    sigma_max: float
    eps_ns: float
    c_align: float
    margin_delta_s: float
    lhs: float
    rhs: float
    bound: float
    value: float
    optimal_value: float
    best_completion: int

    @property
    def assumptions_hold(self) -> bool:
        return (
            self.margin_delta_s > 0
            and 0 < self.eps_ns < 1
            and 0 < self.c_align <= 1
            and abs(self.s_star) <= self.bound
        )

    @property
    def value_gap(self) -> float:
        return self.optimal_value - self.value

    def inequality_holds(self, tol: float = 1e-9) -> bool:
        return self.lhs >= self.rhs - tol


def pl_report(policy: TabularPolicy, scalar_scores, prompt: int, bound: float | None = None) -> PLReport:
    """Measure the constants of the PL bound at the current parameters for one prompt."""
    env = policy.env
    s = np.asarray(scalar_scores, dtype=float)[prompt]
    order = np.argsort(s)
    best = int(order[-1])
    if env.num_completions > 1:
        delta_s = float(s[best] - s[order[-2]])
        if delta_s <= 0:
            raise AssumptionViolation("scalar score has a tied maximizer")
    else:
        delta_s = math.inf
    B = float(np.abs(s).max()) if bound is None else float(bound)
    if not B > 0:
        raise AssumptionViolation("score bound must be positive")
    p = completion_dist(policy, prompt)
    p_star = float(p[best])
    eps = non_saturation_margin(policy, prompt)
    c = alignment_constant(token_contributions(policy, prompt, best))
    sv = prefix_jacobian_singular_values(policy, prompt, env.prefix_index[best])
    sigma_min, sigma_max = float(sv.min()), float(sv.max())
    N = env.num_completions
    ratio = N / (N - 1) if N > 1 else math.inf
    gamma = math.sqrt(max(c, 0.0) * env.out_len * sigma_min**2 * eps**2 * ratio)
    odds = p_star / (1.0 - p_star) if p_star < 1.0 else math.inf
    mu = (odds * s[best] * gamma - 2 * B * sigma_max) / (2 * B)
    # gradient of V(x; theta) for this prompt alone
    grad = grad_expectation(policy, np.where(np.arange(env.num_prompts)[:, None] == prompt, s, 0.0))
    grad = grad[prompt] * env.num_prompts
    lhs = 0.5 * float(np.sum(grad**2))
    v_now = float(p @ s)
    gap = float(s[best] - v_now)
    rhs = mu * gap if gap != 0 else 0.0
    return PLReport(
        mu=float(mu),
        gamma_const=gamma,
        p_star=p_star,
        s_star=float(s[best]),
        sigma_min=sigma_min,
        sigma_max=sigma_max,
        eps_ns=eps,
        c_align=c,
        margin_delta_s=delta_s,
        lhs=lhs,
        rhs=float(rhs),
        bound=B,
        value=v_now,
        optimal_value=float(s[best]),
        best_completion=best,
    )


def exact_objective_changes(policy: TabularPolicy, rewards: RewardTable, new_policy: TabularPolicy) -> np.ndarray:
    return np.array(
        [
            expected_reward(new_policy, rewards, m) - expected_reward(policy, rewards, m)
            for m in range(rewards.num_objectives)
        ]
    )


def exact_covariances(policy: TabularPolicy, rewards: RewardTable, weights_table) -> np.ndarray:
    """E_x Cov_{p_theta}(r_m, w) for every objective."""
    dists = all_completion_dists(policy)
    w = np.asarray(weights_table, dtype=float)
    out = np.zeros(rewards.num_objectives)
    for x in range(policy.env.num_prompts):
        for m in range(rewards.num_objectives):
            out[m] += reward_covariance(dists[x], rewards.values[x, :, m], w[x])
    return out / policy.env.num_prompts


__all__ = [name for name in dir() if not name.startswith("_")]
