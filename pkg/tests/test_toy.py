import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobandit import calculus as calc
from mobandit import oracle, toy
from mobandit.toy import TwoModeConfig

unit = st.floats(-1.0, 1.0)


class TestTwoMode:
    @settings(max_examples=60, deadline=None)
    @given(p0=st.floats(0.01, 0.99), sg=unit, sb=unit, eta=st.floats(0.0, 3.0))
    def test_one_step_is_tilt(self, p0, sg, sb, eta):
        cfg = TwoModeConfig(p0=p0, s_good=sg, s_bad=sb, eta=eta)
        q = calc.exponential_tilt([1 - p0, p0], [sg, sb], eta).tilted
        assert abs(toy.one_step(p0, cfg) - q[1]) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(p=st.floats(0.001, 0.999), sg=unit, sb=unit, rg=unit, rb=unit)
    def test_covariance_matches_oracle(self, p, sg, sb, rg, rb):
        cfg = TwoModeConfig(s_good=sg, s_bad=sb, r_good=rg, r_bad=rb)
        ref = oracle.brute_force_covariance([1 - p, p], [rg, rb], [sg, sb])
        assert abs(float(toy.closed_form_covariance(cfg, p)) - ref) <= 1e-12

    def test_trajectory_equals_iterated_map(self):
        cfg = TwoModeConfig(p0=0.3, eta=0.25, steps=40)
        traj = toy.log_odds_trajectory(cfg)
        p = cfg.p0
        for t in range(1, 41):
            p = toy.one_step(p, cfg)
            assert traj[t] == pytest.approx(p, abs=1e-13)

    def test_interference_strictly_decreases(self):
        cfg = TwoModeConfig()
        r = toy.expected_objective(cfg, toy.log_odds_trajectory(cfg))
        assert len(r) == 201
        assert np.all(np.diff(r) < 0)
        assert np.all(toy.closed_form_covariance(cfg, toy.log_odds_trajectory(cfg)) < 0)

    def test_table_columns(self):
        tab = toy.trajectory_table(TwoModeConfig(steps=3))
        assert list(tab) == ["t", "p_t", "expected_r", "covariance"]
        np.testing.assert_array_equal(tab["t"], [0, 1, 2, 3])

    def test_no_overflow_far_out(self):
        cfg = TwoModeConfig(eta=50.0, steps=100)
        traj = toy.log_odds_trajectory(cfg)
        assert np.all(np.isfinite(traj)) and traj[-1] == 1.0

    @pytest.mark.parametrize("kw", [{"p0": 0.0}, {"p0": 1.0}, {"eta": -1.0}, {"steps": -1}, {"s_bad": math.nan}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TwoModeConfig(**kw)
