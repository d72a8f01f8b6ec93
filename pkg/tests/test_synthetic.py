import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factor_regimes.synthetic import HmmSpec, balanced_accuracy, simulate, simulate_universe


class TestSimulate:
    def test_frozen_bull(self):
        sim = simulate(HmmSpec(p_stay=(1.0, 1.0), T=2000, seed=1))
        assert np.all(sim.states == 0)
        a = sim.active.values
        se = 0.06 * np.sqrt(252) / np.sqrt(2000)  # annualized standard error of the mean
        assert abs(a.mean() * 252 - 0.10) < 4 * se
        assert a.std() * np.sqrt(252) == pytest.approx(0.06, rel=0.05)

    def test_mean_sojourn(self):
        s = np.concatenate([simulate(HmmSpec(T=6000, seed=k)).states for k in range(10)])
        runs = np.diff(np.flatnonzero(np.r_[True, s[1:] != s[:-1], True]))
        # completed runs only approximate 1/(1-p); allow sampling noise
        assert np.mean(runs) == pytest.approx(1 / (1 - 0.998), rel=0.25)

    def test_deterministic(self):
        a, b = simulate(HmmSpec(seed=7, T=500)), simulate(HmmSpec(seed=7, T=500))
        assert np.array_equal(a.active.values, b.active.values)
        assert np.array_equal(a.states, b.states)
        assert a.env.frame.equals(b.env.frame)

    def test_stationary_occupancy(self):
        p = (0.99, 0.98)
        spec = HmmSpec(p_stay=p, T=60_000, seed=3)
        s = simulate(spec).states
        pi0 = (1 - p[1]) / ((1 - p[0]) + (1 - p[1]))
        # effective sample size shrinks with persistence: var factor (1+rho)/(1-rho)
        rho = p[0] + p[1] - 1
        se = np.sqrt(pi0 * (1 - pi0) / len(s) * (1 + rho) / (1 - rho))
        assert abs(np.mean(s == 0) - pi0) < 3 * se

    def test_invalid(self):
        with pytest.raises(ValueError):
            HmmSpec(p_stay=(0.0, 0.5))
        with pytest.raises(ValueError):
            HmmSpec(vol=(0.0, 0.1))

    def test_universe_columns(self):
        uni = simulate_universe(T=50, seed=0, factors=["value", "size"])
        assert uni.panel.columns == ["market", "value", "size", "rf", "vix", "y2", "y10"]
        assert set(uni.states) == {"value", "size"}


class TestBalancedAccuracy:
    def test_examples(self):
        t = np.array([0, 0, 1, 1, 1])
        assert balanced_accuracy(t, t) == 1.0
        assert balanced_accuracy(t, 1 - t) == 1.0
        assert balanced_accuracy(t, np.zeros(5, dtype=int)) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            balanced_accuracy([0, 1], [0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=2, max_size=40), st.integers(0, 10**6))
    def test_permutation_invariant(self, truth, seed):
        truth = np.array(truth)
        pred = np.random.default_rng(seed).integers(0, 2, len(truth))
        assert balanced_accuracy(truth, pred) == balanced_accuracy(truth, 1 - pred)
        assert 0 <= balanced_accuracy(truth, pred) <= 1
