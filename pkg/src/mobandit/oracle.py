"""Brute-force reference computations.

Nothing here imports the modules it is used to check.  Completion
probabilities are rebuilt by walking token sequences with ``itertools.product``
and plain softmax, gradients come from central differences, and the tilt is
checked against an exhaustive simplex grid.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

ORDER_BAND = (0.15, 0.35)
DEGENERATE_RESIDUAL = 1e-13


def kl_objective(q, p, scores, eta: float) -> float:
    """E_q[s] - KL(q || p) / eta with 0 log 0 = 0 and -inf off the support of p."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    s = np.asarray(scores, dtype=float)
    kl = 0.0
    for qi, pi in zip(q, p):
        if qi <= 0:
            continue
        if pi <= 0:
            return -math.inf
        kl += qi * math.log(qi / pi)
    return float(q @ s) - kl / eta


def simplex_grid(n: int, step: float) -> np.ndarray:
    """All points of the n-simplex whose coordinates are multiples of ``step``."""
    return _simplex_grid(int(n), float(step)).copy()


@functools.lru_cache(maxsize=16)
def _simplex_grid(n: int, step: float) -> np.ndarray:
    units = int(round(1.0 / step))
    if abs(units * step - 1.0) > 1e-12:
        raise ValueError("grid step must divide 1")
    pts = [c for c in itertools.product(range(units + 1), repeat=n - 1) if sum(c) <= units]
    arr = np.array(pts, dtype=float).reshape(-1, n - 1)
    last = units - arr.sum(axis=1, keepdims=True)
    return np.hstack([arr, last]) / units


@dataclass(frozen=True)
class GridResult:
    point: np.ndarray
    objective: float


def grid_maximize_kl_objective(dist, scores, eta: float, grid_step: float = 0.02) -> GridResult:
    p = np.asarray(dist, dtype=float)
    if len(p) > 4:
        raise ValueError("grid search is limited to at most 4 outcomes")
    if grid_step > 0.02 + 1e-15:
        raise ValueError("grid step must be at most 0.02")
    grid = simplex_grid(len(p), grid_step)
    s = np.asarray(scores, dtype=float)
    # vectorised KL with the support conventions
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(grid > 0, grid * np.log(grid / p[None, :]), 0.0)
    off_support = np.any((grid > 0) & (p[None, :] <= 0), axis=1)
    vals = grid @ s - ratio.sum(axis=1) / eta
    vals[off_support] = -np.inf
    best = int(np.argmax(vals))
    return GridResult(grid[best], float(vals[best]))


def finite_diff_gradient(fn, point, step: float = 1e-5) -> np.ndarray:
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        out.flat[i] = (fn(xp) - fn(xm)) / (2 * step)
    return out


@dataclass(frozen=True)
class OrderCheckResult:
    etas: np.ndarray
    residuals: np.ndarray
    ratios: np.ndarray
    passed: bool
    degenerate: bool

    @property
    def verdict(self) -> str:
        if self.degenerate:
            return "pass (degenerate)"
        return "pass" if self.passed else "fail"


def order_ratios(etas, residuals, floor: float = DEGENERATE_RESIDUAL):
    residuals = np.asarray(residuals, dtype=float)
    ratios = []
    for a, b in zip(residuals[:-1], residuals[1:]):
        if a < floor or b < floor:
            continue
        ratios.append(b / a)
    return np.array(ratios)


def order_check_values(etas, residuals, band=ORDER_BAND) -> OrderCheckResult:
    etas = np.asarray(etas, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    ratios = order_ratios(etas, residuals)
    degenerate = ratios.size == 0
    passed = degenerate or bool(np.all((ratios >= band[0]) & (ratios <= band[1])))
    return OrderCheckResult(etas, residuals, ratios, passed, degenerate)


def order_check(residual_fn, eta_start: float = 1e-2, halvings: int = 3) -> OrderCheckResult:
    """Evaluate ``residual_fn`` at eta, eta/2, ... and test for second-order decay."""
    if halvings < 3:
        raise ValueError("need at least 3 halvings")
    etas = eta_start * 0.5 ** np.arange(halvings + 1)
    residuals = np.array([abs(float(residual_fn(e))) for e in etas])
    return order_check_values(etas, residuals)


# ---------------------------------------------------------------------------
# independent enumeration of tabular policies
# ---------------------------------------------------------------------------


def _softmax(v):
    v = np.asarray(v, dtype=float)
    e = np.exp(v - v.max())
    return e / e.sum()


def brute_force_completion_probs(logits, vocab_size: int, out_len: int) -> np.ndarray:
    """Probabilities of all completions of one prompt from its (P, V) logit blocks.

    Walks every token tuple and looks blocks up by a dictionary keyed on the
    prefix tuple, which is rebuilt here from scratch.
    """
    V, L = vocab_size, out_len
    blocks = np.asarray(logits, dtype=float).reshape(-1, V)
    key_to_row = {}
    row = 0
    for length in range(L):
        for prefix in itertools.product(range(V), repeat=length):
            key_to_row[prefix] = row
            row += 1
    probs = []
    for seq in itertools.product(range(V), repeat=L):
        prob = 1.0
        for l in range(L):
            prob *= _softmax(blocks[key_to_row[seq[:l]]])[seq[l]]
        probs.append(prob)
    return np.array(probs)


def brute_force_expectation(logits, table, vocab_size: int, out_len: int) -> float:
    """E_x E_y[table[x, y]] for logits of shape (num_prompts, P, V)."""
    logits = np.asarray(logits, dtype=float)
    table = np.asarray(table, dtype=float)
    n = logits.shape[0]
    return float(
        sum(brute_force_completion_probs(logits[x], vocab_size, out_len) @ table[x] for x in range(n)) / n
    )


def brute_force_kl(logits, ref_logits, vocab_size: int, out_len: int) -> float:
    logits = np.asarray(logits, dtype=float)
    ref_logits = np.asarray(ref_logits, dtype=float)
    total = 0.0
    for x in range(logits.shape[0]):
        p = brute_force_completion_probs(logits[x], vocab_size, out_len)
        q = brute_force_completion_probs(ref_logits[x], vocab_size, out_len)
        total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
    return total / logits.shape[0]


def brute_force_entropy(logits, vocab_size: int, out_len: int) -> float:
    logits = np.asarray(logits, dtype=float)
    total = 0.0
    for x in range(logits.shape[0]):
        p = brute_force_completion_probs(logits[x], vocab_size, out_len)
        total -= sum(pi * math.log(pi) for pi in p if pi > 0)
    return total / logits.shape[0]


def brute_force_covariance(probs, a, b) -> float:
    """Covariance by explicit double loop over outcomes: 1/2 sum p_i p_j (a_i - a_j)(b_i - b_j)."""
    total = 0.0
    for i, pi in enumerate(probs):
        for j, pj in enumerate(probs):
            total += pi * pj * (a[i] - a[j]) * (b[i] - b[j])
    return 0.5 * total


def brute_force_tilt(dist, scores, eta: float) -> np.ndarray:
    w = [pi * math.exp(eta * si) for pi, si in zip(dist, scores)]
    z = sum(w)
    return np.array([wi / z for wi in w])


def pinv_solve(F, rhs, rel: float = 1e-10) -> np.ndarray:
    """Reference pseudo-inverse solve through numpy's SVD-based ``pinv``."""
    F = np.asarray(F, dtype=float)
    return np.linalg.pinv(F, rcond=rel, hermitian=True) @ np.asarray(rhs, dtype=float)


def mgda_bruteforce(gradients, step: float = 0.01) -> tuple[np.ndarray, float]:
    """Grid search over simplex weights for the min-norm combination (M <= 4)."""
    g = np.atleast_2d(np.asarray(gradients, dtype=float))
    grid = simplex_grid(g.shape[0], step)
    norms = np.sum((grid @ g) ** 2, axis=1)
    best = int(np.argmin(norms))
    return grid[best], float(norms[best])
