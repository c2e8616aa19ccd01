import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobandit import calculus as calc
from mobandit import core, oracle
from mobandit.core import EnvSpec, RewardTable, TabularPolicy


def _instance(seed, P=1, V=2, L=2, M=2):
    rng = np.random.default_rng(seed)
    env = EnvSpec(P, V, L, M)
    pol = TabularPolicy.random(env, rng)
    R = RewardTable.for_env(env, rng.uniform(-1, 1, size=(P, env.num_completions, M)))
    return env, pol, R, rng


class TestTilt:
    def test_matches_oracle(self, rng):
        for _ in range(20):
            p = rng.dirichlet(np.ones(5))
            s = rng.normal(size=5)
            np.testing.assert_allclose(
                calc.exponential_tilt(p, s, 0.7).tilted, oracle.brute_force_tilt(p, s, 0.7), atol=1e-14
            )

    def test_large_eta_is_stable(self):
        q = calc.exponential_tilt([0.5, 0.5], [1.0, 0.0], 1e4).tilted
        assert np.all(np.isfinite(q))
        np.testing.assert_allclose(q, [1.0, 0.0], atol=1e-300)

    def test_zero_mass_stays_zero(self):
        q = calc.exponential_tilt([0.0, 0.4, 0.6], [100.0, 0.0, 1.0], 1.0).tilted
        assert q[0] == 0.0

    def test_log_partition(self):
        res = calc.exponential_tilt([0.5, 0.5], [math.log(3), 0.0], 1.0)
        assert res.log_partition == pytest.approx(math.log(2.0), abs=1e-15)

    def test_rejects_bad_input(self):
        with pytest.raises(calc.InvalidInput):
            calc.exponential_tilt([0.0, 0.0], [0.0, 0.0], 1.0)
        with pytest.raises(calc.InvalidInput):
            calc.exponential_tilt([0.5, 0.5], [0.0, 0.0], math.inf)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), eta=st.floats(0.1, 3.0))
    def test_beats_grid(self, seed, eta):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 4))
        p = rng.dirichlet(np.ones(k))
        s = rng.uniform(-1, 1, size=k)
        q = calc.exponential_tilt(p, s, eta).tilted
        grid = oracle.grid_maximize_kl_objective(p, s, eta, 0.02)
        assert oracle.kl_objective(q, p, s, eta) >= grid.objective - 1e-9


class TestCovarianceLaw:
    def test_covariance_matches_double_loop(self, rng):
        p = rng.dirichlet(np.ones(6))
        a, b = rng.normal(size=(2, 6))
        assert calc.reward_covariance(p, a, b) == pytest.approx(oracle.brute_force_covariance(p, a, b), abs=1e-14)

    def test_second_order_residual(self):
        env, pol, R, rng = _instance(3, P=2, V=3, L=2)
        s = rng.uniform(-1, 1, size=(2, env.num_completions))
        for m in range(2):
            res = oracle.order_check(lambda e: calc.covariance_law_check(pol, R, s, e).residual[m])
            assert res.passed

    def test_positive_eta_required(self, small_instance):
        _, pol, R = small_instance
        with pytest.raises(calc.InvalidInput):
            calc.covariance_law_check(pol, R, np.zeros((2, 9)), 0.0)

    def test_exact_covariances(self, small_instance):
        env, pol, R = small_instance
        w = R.values @ np.array([1.0, -0.5])
        got = calc.exact_covariances(pol, R, w)
        dists = core.all_completion_dists(pol)
        for m in range(2):
            ref = np.mean([oracle.brute_force_covariance(dists[x], R.values[x, :, m], w[x]) for x in range(2)])
            assert got[m] == pytest.approx(ref, abs=1e-14)


class TestGradients:
    @pytest.mark.parametrize("seed", range(4))
    def test_value_gradient(self, seed):
        env, pol, R, rng = _instance(seed, P=2, V=3, L=2)
        s = rng.uniform(-1, 1, size=(2, env.num_completions))
        fd = oracle.finite_diff_gradient(
            lambda th: oracle.brute_force_expectation(th.reshape(pol.logits.shape), s, 3, 2), pol.flat
        )
        np.testing.assert_allclose(calc.policy_gradient_value(pol, s), fd, atol=1e-9)

    def test_kl_and_entropy_gradients(self):
        env, pol, _, rng = _instance(9, P=1, V=2, L=3)
        ref = TabularPolicy.random(env, rng)
        shape = pol.logits.shape
        fd_kl = oracle.finite_diff_gradient(lambda th: oracle.brute_force_kl(th.reshape(shape), ref.logits, 2, 3), pol.flat)
        fd_h = oracle.finite_diff_gradient(lambda th: oracle.brute_force_entropy(th.reshape(shape), 2, 3), pol.flat)
        np.testing.assert_allclose(calc.kl_gradient(pol, ref), fd_kl, atol=1e-9)
        np.testing.assert_allclose(calc.entropy_gradient(pol), fd_h, atol=1e-9)

    def test_kl_entropy_values(self):
        env, pol, _, rng = _instance(4, P=2, V=2, L=2)
        ref = TabularPolicy.random(env, rng)
        assert calc.kl_divergence(pol, ref) == pytest.approx(oracle.brute_force_kl(pol.logits, ref.logits, 2, 2), abs=1e-13)
        assert calc.entropy(pol) == pytest.approx(oracle.brute_force_entropy(pol.logits, 2, 2), abs=1e-13)
        assert calc.kl_divergence(pol, pol) == pytest.approx(0.0, abs=1e-15)

    def test_regularizer_combination(self):
        env, pol, _, rng = _instance(5)
        ref = TabularPolicy.random(env, rng)
        got = calc.regularizer_gradient(pol, ref, 0.3, 0.2)
        np.testing.assert_allclose(got, 0.3 * calc.kl_gradient(pol, ref) - 0.2 * calc.entropy_gradient(pol), atol=1e-15)

    def test_cosines(self):
        cos = calc.gradient_cosines(np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]))
        assert cos[0, 1] == pytest.approx(0.0)
        assert math.isnan(cos[0, 2])
        assert calc.min_offdiag(calc.gradient_cosines(np.array([[1.0, 0.0], [-1.0, 0.0]]))) == pytest.approx(-1.0)


class TestGrpo:
    def test_advantages_standardized(self):
        A = calc.grpo_advantages([1.0, 2.0, 3.0, 6.0])
        assert A.mean() == pytest.approx(0.0, abs=1e-15)
        assert np.sqrt(np.mean(A**2)) == pytest.approx(1.0, abs=1e-14)

    def test_degenerate_group_is_zero(self):
        np.testing.assert_array_equal(calc.grpo_advantages([0.3, 0.3, 0.3]), 0.0)

    def test_group_needs_two(self):
        with pytest.raises(calc.InvalidInput):
            calc.grpo_advantages([1.0])

    @pytest.mark.parametrize(
        "A, rho, expected",
        [(1.0, 1.2, True), (1.0, 1.2000001, False), (1.0, 0.1, True), (-1.0, 0.8, True), (-1.0, 0.79, False), (-1.0, 5.0, True), (0.0, 1.3, False)],
    )
    def test_indicator_table(self, A, rho, expected):
        assert bool(calc.unclipped_indicator(A, rho, 0.2)) is expected

    def test_clip_at_old_policy(self):
        env, pol, _, _ = _instance(1)
        rho, ind, W = calc.clip_arrays(pol, pol, 0, [0, 3], [0.5, -1.5], 0.2)
        np.testing.assert_array_equal(rho, 1.0)
        assert ind.all()
        np.testing.assert_array_equal(W, [[0.5, 0.5], [-1.5, -1.5]])
        states = calc.clip_state(pol, pol, 0, 3, -1.5, 0.2)
        assert calc.completion_weight(states) == -1.5

    def test_surrogate_matches_finite_differences(self):
        env, pol, _, rng = _instance(2, V=3, L=2)
        old = pol.with_params(pol.flat + rng.normal(scale=0.05, size=pol.num_params))
        ys = np.array([0, 4, 4, 8])
        A = np.array([1.0, -0.5, -0.5, 0.0])

        def surrogate(th):
            p = pol.with_params(th)
            lp = p.completion_token_log_probs(0)[ys]
            lq = old.completion_token_log_probs(0)[ys]
            rho = np.exp(lp - lq)
            return float(np.sum(np.minimum(rho * A[:, None], np.clip(rho, 0.8, 1.2) * A[:, None])))

        fd = oracle.finite_diff_gradient(surrogate, pol.flat, 1e-6)
        got = calc.surrogate_gradient(pol, old, 0, ys, A, 0.2)
        np.testing.assert_allclose(got.ravel(), fd, atol=1e-7)

    def test_zero_probability_old_token(self):
        env = EnvSpec(1, 2, 1, 1)
        old = TabularPolicy(env, np.array([[[0.0, -np.inf]]]))
        with pytest.raises(calc.InvalidInput):
            calc.token_ratios(TabularPolicy(env), old, 0, [1])


class TestFisher:
    def test_categorical(self):
        p = np.array([0.2, 0.3, 0.5])
        ref = sum(pi * np.outer(np.eye(3)[i] - p, np.eye(3)[i] - p) for i, pi in enumerate(p))
        np.testing.assert_allclose(calc.fisher_categorical(p), ref, atol=1e-15)

    def test_natural_gradient_flat(self):
        p = np.array([0.1, 0.6, 0.3])
        d = calc.natural_gradient_flat(p, [1.0, 0.0, -1.0])
        assert p @ d == pytest.approx(0.0, abs=1e-15)

    def test_aggregated_exact_vs_monte_carlo(self):
        env, pol, _, _ = _instance(6, V=2, L=2)
        exact = calc.fisher_aggregated(pol, 0, 4)
        mc = calc.fisher_aggregated(pol, 0, 4, rng=np.random.default_rng(0), num_groups=200_000)
        np.testing.assert_allclose(mc, exact, atol=0.1)

    def test_pseudo_inverse_matches_numpy(self):
        env, pol, _, rng = _instance(7, V=3, L=1)
        F = calc.fisher_aggregated(pol, 0, 3)
        rhs = F @ rng.normal(size=F.shape[0])
        d = calc.natural_gradient_general(F, rhs)
        assert not d.inconsistent
        np.testing.assert_allclose(d.direction, oracle.pinv_solve(F, rhs), atol=1e-10)

    def test_null_space_warning(self):
        F = np.diag([1.0, 0.0])
        with pytest.warns(RuntimeWarning):
            res = calc.natural_gradient_general(F, np.array([1.0, 1.0]))
        assert res.inconsistent
        assert res.null_residual == pytest.approx(1.0)

    def test_inverse_norm(self):
        assert calc.fisher_inverse_norm(np.diag([4.0, 1.0]), np.array([2.0, 1.0])) == pytest.approx(math.sqrt(2.0))


class TestGroupMoments:
    def test_composition_count(self):
        c = calc.compositions(3, 4)
        assert len(c) == math.comb(6, 2)
        np.testing.assert_array_equal(c.sum(axis=1), 4)
        assert len({tuple(r) for r in c}) == len(c)

    def test_exact_vs_monte_carlo(self):
        p = np.array([0.2, 0.5, 0.3])
        s = np.array([1.0, 0.0, -0.5])
        pos, neg, exact = calc.group_advantage_moments(p, s, 4)
        assert exact
        mp, mn, mexact = calc.group_advantage_moments(p, s, 4, rng=np.random.default_rng(0), num_groups=400_000, limit=0)
        assert not mexact
        np.testing.assert_allclose(mp, pos, atol=0.01)
        np.testing.assert_allclose(mn, neg, atol=0.01)

    def test_expected_advantage_sum_zero(self):
        p = np.array([0.1, 0.2, 0.7])
        pos, neg, _ = calc.group_advantage_moments(p, np.array([0.0, 1.0, 2.0]), 5)
        assert (pos + neg).sum() == pytest.approx(0.0, abs=1e-12)

    def test_too_large_without_rng(self):
        with pytest.raises(calc.InvalidInput):
            calc.group_advantage_moments(np.full(50, 0.02), np.arange(50.0), 16)


class TestMargins:
    def test_distortion_zero_at_old(self):
        env, pol, R, rng = _instance(8)
        s = R.values @ np.array([0.5, 0.5])
        rep = calc.margins_and_distortion(pol, pol, R, s, 4, 0.2)
        assert rep.distortion == 0.0
        np.testing.assert_allclose(rep.gamma, rep.gamma_unclip, atol=0)
        assert calc.clipping_distortion(pol, pol, s, 4, 0.2) == 0.0

    def test_bound_holds_far_from_old(self):
        env, old, R, rng = _instance(10)
        new = old.with_params(old.flat + rng.normal(scale=1.0, size=old.num_params))
        s = R.values @ np.array([0.5, 0.5])
        rep = calc.margins_and_distortion(new, old, R, s, 3, 0.2, 0.05, 0.01)
        assert rep.distortion > 0
        assert np.all(rep.bound_holds)
        assert np.all(rep.bound_slack >= -1e-9)


class TestPL:
    def test_mu_negative_and_gap_bound(self):
        env = EnvSpec(1, 3, 2, 1)
        rng = np.random.default_rng(0)
        s = rng.uniform(-1, 1, size=(1, 9))
        for _ in range(20):
            pol = TabularPolicy.random(env, rng)
            rep = calc.pl_report(pol, s, 0, bound=1.0)
            assert rep.value_gap <= 2 * rep.bound * (1 - rep.p_star) + 1e-12
            assert rep.c_align == pytest.approx(0.0, abs=1e-12)
            assert rep.mu < 0

    def test_tied_maximizer(self):
        env = EnvSpec(1, 2, 1, 1)
        with pytest.raises(calc.AssumptionViolation):
            calc.pl_report(TabularPolicy(env), np.array([[1.0, 1.0]]), 0)

    def test_trajectory_bound(self):
        env, pol, _, _ = _instance(11, V=3, L=2)
        for y in range(env.num_completions):
            assert calc.trajectory_gradient_bound(pol, 0, y).holds

    def test_single_token_lhs(self):
        env = EnvSpec(1, 2, 1, 1)
        pol = TabularPolicy(env)
        rep = calc.pl_report(pol, np.array([[1.0, 0.0]]), 0, bound=1.0)
        # dV/dz = p (s - V) = (0.25, -0.25)
        assert rep.lhs == pytest.approx(0.0625, abs=1e-15)
        assert rep.value_gap == pytest.approx(0.5)
