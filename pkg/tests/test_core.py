import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobandit import core
from mobandit.core import ConfigurationError, EnvSpec, RewardTable, TabularPolicy
from mobandit import oracle


class TestEnvSpec:
    def test_counts(self):
        env = EnvSpec(2, 3, 2, 1)
        assert env.num_completions == 9
        assert env.num_prefixes == 4
        assert env.num_params == 2 * 4 * 3
        assert env.prefix_offset(0) == 0
        assert env.prefix_offset(1) == 1

    def test_first_token_most_significant(self):
        env = EnvSpec(1, 3, 2, 1)
        assert env.completion_tokens(5) == (1, 2)
        assert env.completion_index((2, 0)) == 6
        for y in range(env.num_completions):
            assert env.completion_index(env.completion_tokens(y)) == y

    def test_prefix_index_blocks(self):
        env = EnvSpec(1, 2, 3, 1)
        # completion (1, 0, 1): root, prefix (1,) -> 1 + 1, prefix (1, 0) -> 3 + 2
        np.testing.assert_array_equal(env.prefix_index[env.completion_index((1, 0, 1))], [0, 2, 5])

    def test_enumeration_cap(self):
        with pytest.raises(ConfigurationError):
            EnvSpec(1, 4, 7, 1)
        EnvSpec(1, 4, 6, 1)  # 4096 exactly is allowed

    @pytest.mark.parametrize("field", ["num_prompts", "vocab_size", "out_len", "num_objectives"])
    def test_rejects_nonpositive(self, field):
        kw = dict(num_prompts=1, vocab_size=2, out_len=1, num_objectives=1)
        kw[field] = 0
        with pytest.raises(ConfigurationError):
            EnvSpec(**kw)


class TestRewardTable:
    def test_shape_checked(self):
        env = EnvSpec(1, 2, 1, 2)
        with pytest.raises(ConfigurationError):
            RewardTable.for_env(env, np.zeros((1, 3, 2)))

    def test_bound_checked(self):
        env = EnvSpec(1, 2, 1, 1, reward_bound=0.5)
        with pytest.raises(ConfigurationError):
            RewardTable.for_env(env, [[[0.7], [0.0]]])

    def test_nonfinite_rejected(self):
        env = EnvSpec(1, 2, 1, 1)
        with pytest.raises(ConfigurationError):
            RewardTable.for_env(env, [[[np.nan], [0.0]]])


class TestDistributions:
    def test_uniform_policy(self):
        env = EnvSpec(1, 3, 2, 1)
        np.testing.assert_allclose(core.completion_dist(TabularPolicy(env), 0), np.full(9, 1 / 9), atol=1e-15)

    def test_matches_oracle(self, small_instance):
        env, pol, _ = small_instance
        ref = [oracle.brute_force_completion_probs(pol.logits[x], env.vocab_size, env.out_len) for x in range(2)]
        np.testing.assert_allclose(core.all_completion_dists(pol), np.array(ref), rtol=0, atol=1e-14)

    def test_extreme_logits_stay_finite(self):
        env = EnvSpec(1, 2, 2, 1)
        pol = TabularPolicy(env, np.array([[[800.0, -800.0]] * 3]))
        p = core.completion_dist(pol, 0)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)

    def test_bad_prompt(self, small_instance):
        _, pol, _ = small_instance
        with pytest.raises(IndexError):
            core.completion_dist(pol, 5)

    @settings(max_examples=40, deadline=None)
    @given(
        V=st.integers(2, 4),
        L=st.integers(1, 3),
        seed=st.integers(0, 2**31 - 1),
        scale=st.floats(0.01, 20.0),
    )
    def test_normalized(self, V, L, seed, scale):
        env = EnvSpec(1, V, L, 1)
        pol = TabularPolicy.random(env, np.random.default_rng(seed), scale)
        p = core.completion_dist(pol, 0)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)


class TestExpectations:
    def test_expected_rewards_match_oracle(self, small_instance):
        env, pol, R = small_instance
        got = core.expected_rewards(pol, R)
        for m in range(2):
            ref = oracle.brute_force_expectation(pol.logits, R.objective(m), env.vocab_size, env.out_len)
            np.testing.assert_allclose(got[m], ref, atol=1e-14)
            np.testing.assert_allclose(core.expected_reward(pol, R, m), ref, atol=1e-14)

    def test_value_and_prompt_value(self, small_instance):
        env, pol, R = small_instance
        s = R.values @ np.array([0.3, 0.7])
        per = [core.prompt_value(pol, s, x) for x in range(env.num_prompts)]
        np.testing.assert_allclose(core.value(pol, s), np.mean(per), atol=1e-15)


class TestSampling:
    def test_empirical_frequencies(self, small_instance):
        _, pol, _ = small_instance
        rng = np.random.default_rng(0)
        draws = core.sample_completions(pol, 0, rng, 200_000)
        freq = np.bincount(draws, minlength=9) / draws.size
        np.testing.assert_allclose(freq, core.completion_dist(pol, 0), atol=5e-3)

    def test_tokenwise_sampler_log_probs(self, small_instance):
        _, pol, _ = small_instance
        rng = np.random.default_rng(1)
        lp = pol.completion_log_probs(1)
        for _ in range(20):
            s = core.sample_completion(pol, 1, rng)
            np.testing.assert_allclose(s.log_prob, lp[s.completion], atol=1e-12)

    def test_seeded_reproducible(self, small_instance):
        _, pol, _ = small_instance
        a = core.sample_completions(pol, 0, np.random.default_rng(7), 50)
        b = core.sample_completions(pol, 0, np.random.default_rng(7), 50)
        np.testing.assert_array_equal(a, b)


class TestPolicy:
    def test_with_params_copies(self, small_instance):
        _, pol, _ = small_instance
        flat = pol.flat
        other = pol.with_params(flat)
        flat[0] += 1.0
        assert other.logits.ravel()[0] != flat[0]
        np.testing.assert_array_equal(other.logits, pol.logits)
