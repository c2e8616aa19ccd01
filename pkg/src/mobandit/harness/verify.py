"""Oracle-backed verification suites.

Each suite draws its own instances from a fixed seed, compares the library
against an independent reference and returns a :class:`SuiteResult`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import calculus as calc
from .. import oracle, scalarize, toy
from ..core import EnvSpec, RewardTable, TabularPolicy, expected_rewards
from . import presets

ORDER_PASS_RATE = 0.95


@dataclass
class SuiteResult:
    name: str
    passed: bool
    n_pass: int
    n_total: int
    notes: list = field(default_factory=list)
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"[{status}] {self.name}: {self.n_pass}/{self.n_total} ({self.seconds:.2f}s)"
        if self.notes:
            text += " | " + "; ".join(self.notes)
        return text


def _random_instance(rng, num_prompts=None, vocab=None, out_len=None, M=2):
    num_prompts = num_prompts or int(rng.integers(1, 3))
    vocab = vocab or int(rng.integers(2, 4))
    out_len = out_len or int(rng.integers(1, 3))
    env = EnvSpec(num_prompts, vocab, out_len, M)
    pol = TabularPolicy.random(env, rng)
    R = RewardTable.for_env(env, rng.uniform(-1, 1, size=(num_prompts, env.num_completions, M)))
    return env, pol, R


def _rel_err(a, b) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


# ---------------------------------------------------------------------------


def suite_tilt(seed=101, n=50) -> SuiteResult:
    rng = np.random.default_rng(seed)
    ok = 0
    worst = math.inf
    for _ in range(n):
        k = int(rng.integers(2, 5))
        p = rng.dirichlet(np.ones(k))
        s = rng.uniform(-1, 1, size=k)
        eta = float(rng.uniform(0.2, 3.0))
        q = calc.exponential_tilt(p, s, eta).tilted
        mine = oracle.kl_objective(q, p, s, eta)
        grid = oracle.grid_maximize_kl_objective(p, s, eta, 0.02)
        margin = mine - grid.objective
        worst = min(worst, margin)
        ok += margin >= -1e-9
    return SuiteResult("tilt", ok == n, ok, n, [f"min(objective - grid max) = {worst:.3e}"])


def suite_covariance_law(seed=202, n=24, eta=1e-2, halvings=3) -> SuiteResult:
    rng = np.random.default_rng(seed)
    good = total = degenerate = 0
    ratios = []
    for _ in range(n):
        env, pol, R = _random_instance(rng)
        s = rng.uniform(-1, 1, size=(env.num_prompts, env.num_completions))
        for m in range(R.num_objectives):
            res = oracle.order_check(lambda e: calc.covariance_law_check(pol, R, s, e).residual[m], eta, halvings)
            if res.degenerate:
                degenerate += 1
                continue
            total += 1
            good += res.passed
            ratios.extend(res.ratios.tolist())
    rate = good / total if total else 1.0
    notes = [f"pass rate {rate:.3f}", f"mean ratio {np.mean(ratios):.4f}", f"degenerate {degenerate}"]
    return SuiteResult("covariance-law", rate >= ORDER_PASS_RATE, good, total, notes)


def _flat_expectation(z, w):
    e = np.exp(z - z.max())
    return float(e @ w / e.sum())


def suite_fisher(seed=303, n=20) -> SuiteResult:
    rng = np.random.default_rng(seed)
    ok = 0
    worst = [0.0, 0.0]
    order_good = order_total = 0
    for _ in range(n):
        k = int(rng.integers(2, 7))
        z = rng.normal(size=k)
        p = np.exp(z - z.max())
        p /= p.sum()
        w = rng.uniform(-1, 1, size=k)
        r = rng.uniform(-1, 1, size=k)
        F = calc.fisher_categorical(p)
        # reference: explicit expectation of score outer products
        ref = sum(pi * np.outer(np.eye(k)[i] - p, np.eye(k)[i] - p) for i, pi in enumerate(p))
        e1 = float(np.max(np.abs(F - ref)))
        d = calc.natural_gradient_flat(p, w)
        fd = oracle.finite_diff_gradient(lambda zz: _flat_expectation(zz, w), z)
        e2 = float(np.max(np.abs(F @ d - fd)))
        worst = [max(worst[0], e1), max(worst[1], e2)]

        def residual(eta):
            moved = _flat_expectation(z + eta * d, r) - _flat_expectation(z, r)
            return moved - eta * oracle.brute_force_covariance(p, r, w)

        res = oracle.order_check(residual, 1e-2, 3)
        if not res.degenerate:
            order_total += 1
            order_good += res.passed
        ok += e1 <= 1e-12 and e2 <= 1e-9
    rate = order_good / order_total if order_total else 1.0
    passed = ok == n and rate >= ORDER_PASS_RATE
    notes = [f"max |F - ref| {worst[0]:.2e}", f"max |F d - grad| {worst[1]:.2e}", f"order pass rate {rate:.3f}"]
    return SuiteResult("fisher", passed, ok, n, notes)


def suite_clipping(seed=404, n=50) -> SuiteResult:
    rng = np.random.default_rng(seed)
    ok = 0
    zero_ok = 0
    worst = math.inf
    for i in range(n):
        env, old, R = _random_instance(rng, num_prompts=int(rng.integers(1, 3)), vocab=2, out_len=int(rng.integers(1, 3)))
        new = old.with_params(old.flat + rng.normal(scale=0.6, size=old.num_params))
        ref = TabularPolicy.random(env, rng)
        s = rng.uniform(-1, 1, size=(env.num_prompts, env.num_completions))
        K = int(rng.integers(2, 6))
        beta, lam = (0.0, 0.0) if i % 2 == 0 else (float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.1)))
        rep = calc.margins_and_distortion(new, old, R, s, K, 0.2, beta, lam, reference=ref)
        worst = min(worst, float(rep.bound_slack.min()))
        ok += bool(np.all(rep.bound_holds))
        same = calc.margins_and_distortion(old, old, R, s, K, 0.2, beta, lam, reference=ref)
        zero_ok += same.distortion == 0.0
    passed = ok == n and zero_ok == n
    notes = [f"min slack {worst:.3e}", f"distortion exactly 0 at old policy: {zero_ok}/{n}"]
    return SuiteResult("clipping", passed, ok, n, notes)


def suite_pl(seed=505, n=200) -> SuiteResult:
    env_d, values, _ = presets.reward_preset("pl-bandit")
    env = EnvSpec(**env_d)
    R = RewardTable.for_env(env, values)
    s = R.values @ np.array([0.5, 0.5])
    rng = np.random.default_rng(seed)
    positive = ineq_ok = gap_ok = traj_ok = traj_total = 0
    for _ in range(n):
        pol = TabularPolicy.random(env, rng, scale=float(rng.uniform(0.2, 3.0)))
        rep = calc.pl_report(pol, s, 0, bound=env.reward_bound)
        if rep.mu > 0 and rep.assumptions_hold:
            positive += 1
            ineq_ok += rep.inequality_holds(1e-9)
        gap_ok += rep.value_gap <= 2 * rep.bound * (1 - rep.p_star) + 1e-12
        for y in range(env.num_completions):
            traj_total += 1
            traj_ok += calc.trajectory_gradient_bound(pol, 0, y).holds
    passed = gap_ok == n and ineq_ok == positive and traj_ok == traj_total
    notes = [
        f"mu>0 fraction {positive / n:.3f} ({positive}/{n})",
        f"PL inequality {ineq_ok}/{positive}",
        f"value-gap bound {gap_ok}/{n}",
        f"trajectory lower bound {traj_ok}/{traj_total}",
    ]
    return SuiteResult("pl", passed, gap_ok + ineq_ok, n + positive, notes, extra={"mu_positive_fraction": positive / n})


def suite_toy(seed=606, n=100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    ok = 0
    worst = [0.0, 0.0]
    for _ in range(n):
        cfg = toy.TwoModeConfig(
            p0=float(rng.uniform(0.05, 0.95)),
            s_good=float(rng.uniform(-1, 1)),
            s_bad=float(rng.uniform(-1, 1)),
            r_good=float(rng.uniform(-1, 1)),
            r_bad=float(rng.uniform(-1, 1)),
            eta=float(rng.uniform(0.01, 2.0)),
            steps=1,
        )
        dist = np.array([1 - cfg.p0, cfg.p0])  # (good, bad)
        tilted = calc.exponential_tilt(dist, np.array([cfg.s_good, cfg.s_bad]), cfg.eta).tilted
        e1 = abs(tilted[1] - toy.one_step(cfg.p0, cfg))
        brute = oracle.brute_force_covariance(dist, [cfg.r_good, cfg.r_bad], [cfg.s_good, cfg.s_bad])
        e2 = abs(float(toy.closed_form_covariance(cfg, cfg.p0)) - brute)
        worst = [max(worst[0], e1), max(worst[1], e2)]
        ok += e1 <= 1e-12 and e2 <= 1e-12
    demo = toy.TwoModeConfig()
    traj = toy.expected_objective(demo, toy.log_odds_trajectory(demo))
    decreasing = bool(np.all(np.diff(traj) < 0))
    notes = [f"max map error {worst[0]:.2e}", f"max covariance error {worst[1]:.2e}", f"strictly decreasing over {demo.steps} steps: {decreasing}"]
    return SuiteResult("toy", ok == n and decreasing, ok, n, notes)


def suite_gradients(seed=707, n=20) -> SuiteResult:
    from ..oracle import brute_force_entropy, brute_force_expectation, brute_force_kl

    rng = np.random.default_rng(seed)
    ok = 0
    worst = [0.0, 0.0, 0.0]
    for _ in range(n):
        env, pol, _ = _random_instance(rng)
        ref = TabularPolicy.random(env, rng)
        s = rng.uniform(-1, 1, size=(env.num_prompts, env.num_completions))
        shape = pol.logits.shape
        V, L = env.vocab_size, env.out_len
        errs = [
            _rel_err(
                calc.policy_gradient_value(pol, s),
                oracle.finite_diff_gradient(lambda th: brute_force_expectation(th.reshape(shape), s, V, L), pol.flat),
            ),
            _rel_err(
                calc.kl_gradient(pol, ref),
                oracle.finite_diff_gradient(lambda th: brute_force_kl(th.reshape(shape), ref.logits, V, L), pol.flat),
            ),
            _rel_err(
                calc.entropy_gradient(pol),
                oracle.finite_diff_gradient(lambda th: brute_force_entropy(th.reshape(shape), V, L), pol.flat),
            ),
        ]
        worst = [max(a, b) for a, b in zip(worst, errs)]
        ok += all(e <= 1e-6 for e in errs)
    notes = [f"max rel err value {worst[0]:.1e}, KL {worst[1]:.1e}, entropy {worst[2]:.1e}"]
    return SuiteResult("gradients", ok == n, ok, n, notes)


def suite_mgda(seed=808, n=20) -> SuiteResult:
    checks = []
    w = scalarize.mgda_minnorm([[1.0, 0.0], [0.0, 1.0]])
    checks.append(bool(np.all(w == 0.5)))
    w = scalarize.mgda_minnorm([[1.0, 0.0], [-1.0, 0.0]])
    checks.append(float(np.linalg.norm(w @ np.array([[1.0, 0.0], [-1.0, 0.0]]))) <= 1e-10)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        M = int(rng.integers(2, 6))
        g = rng.normal(size=(M, int(rng.integers(2, 8))))
        w = scalarize.mgda_minnorm(g)
        d = w @ g
        resid = max(0.0, float(np.max(d @ d - g @ d)))
        worst = max(worst, resid)
        checks.append(resid <= 1e-6 and abs(w.sum() - 1) <= 1e-12 and np.all(w >= 0))
    ok = sum(checks)
    return SuiteResult("mgda", ok == len(checks), ok, len(checks), [f"max KKT residual {worst:.1e}"])


def suite_controllers() -> SuiteResult:
    checks = {}
    st = scalarize.CtwaState.create([1.0, 1.0, 1.0], [0.15, 0.08, 0.08], 0.1, 0.05)
    new = scalarize.ctwa_step(st, [0.05, 0.08, 0.08])
    checks["ctwa"] = (
        abs(new.ema[0] - 0.005) <= 1e-12
        and abs(new.last_deficit[0] - 0.145) <= 1e-12
        and abs(new.u[0] - 0.00725) <= 1e-12
        and abs(new.weights[0] - math.exp(0.00725)) <= 1e-12
    )
    lag = scalarize.LagrangianState.create([0.9], 0.01, multipliers=[0.001])
    checks["lagrangian"] = scalarize.lagrangian_dual_update(lag, [1.9]).multipliers[0] == 0.0
    lag0 = scalarize.LagrangianState.create([0.9], 0.01)
    checks["lagrangian-ascent"] = abs(scalarize.lagrangian_dual_update(lag0, [0.4]).multipliers[0] - 0.005) <= 1e-12
    scores, _ = scalarize.tchebycheff_step(
        scalarize.TchebycheffState(np.array([0.5, 0.5]), np.array([1.0, 1.0])), [[0.6, 1.0]]
    )
    checks["tchebycheff"] = abs(scores[0] + 0.2) <= 1e-12
    gn = scalarize.GradNormState.create(2)
    _, gn1 = scalarize.gradnorm_step(gn, [0.7, 0.4], [[2.0, 0.0], [0.0, 1.0]])
    checks["gradnorm"] = (
        np.array_equal(gn1.reference_losses, [0.7, 0.4])
        and np.allclose(gn1.last_targets, 1.5, rtol=0, atol=1e-12)
    )
    ok = sum(checks.values())
    failed = [k for k, v in checks.items() if not v]
    return SuiteResult("controllers", ok == len(checks), ok, len(checks), [f"failed: {failed}"] if failed else [])


def suite_interference(seed=0) -> SuiteResult:
    """Fixed linear weights degrade objective 0; CTWA keeps every objective and covariance up."""
    from ..train import run_experiment
    from .config import preset_config

    lin = preset_config("interference-linear")
    res = run_experiment(lin.env_spec(), lin.reward_table(), lin.train_config(seed), policy=lin.initial_policy())
    r0 = np.array([rec.rewards[0] for rec in res.records])
    dec = np.diff(r0) < 0
    longest = run = 0
    for d in dec:
        run = run + 1 if d else 0
        longest = max(longest, run)
    ctwa = preset_config("interference-ctwa")
    start = expected_rewards(ctwa.initial_policy(), ctwa.reward_table())
    res = run_experiment(ctwa.env_spec(), ctwa.reward_table(), ctwa.train_config(seed), policy=ctwa.initial_policy())
    final = res.records[-1].rewards
    targets = np.asarray(ctwa.controller.targets)
    ema = np.zeros_like(targets)
    emas = []
    tau = ctwa.controller.ema_rate
    for rec in res.records:
        ema = (1 - tau) * ema + tau * rec.covariances
        emas.append(ema)
    emas = np.array(emas)
    burn = len(emas) // 2
    cov_ok = bool(np.all(emas[burn:] >= targets - 0.02))
    checks = [longest >= 100, bool(np.all(final >= start - 1e-3)), cov_ok]
    notes = [
        f"linear: r_0 strictly decreases for {longest} consecutive steps",
        f"ctwa: final - initial rewards {np.round(final - start, 4).tolist()}",
        f"ctwa: min EMA covariance after burn-in {np.round(emas[burn:].min(axis=0), 4).tolist()}",
    ]
    return SuiteResult("interference", all(checks), sum(checks), len(checks), notes)


SUITES = {
    "tilt": suite_tilt,
    "covariance-law": suite_covariance_law,
    "fisher": suite_fisher,
    "clipping": suite_clipping,
    "pl": suite_pl,
    "toy": suite_toy,
    "gradients": suite_gradients,
    "mgda": suite_mgda,
    "controllers": suite_controllers,
    "interference": suite_interference,
}


def run_suites(names) -> list[SuiteResult]:
    out = []
    for name in names:
        t0 = time.perf_counter()
        res = SUITES[name]()
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
