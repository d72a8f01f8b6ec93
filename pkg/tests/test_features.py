import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factor_regimes.features import (
    FeatureMatrix,
    FeatureStats,
    active_beta,
    build_features,
    downside_deviation,
    ewma,
    feature_specs,
    log_downside_deviation,
    macd,
    rsi,
    standardize,
    stochastic_k,
)
from factor_regimes.market_data import AlignedPanel, DataError, PriceIndex, ReturnSeries, cumulative_index
from factor_regimes.synthetic import HmmSpec, simulate


def _index(levels):
    levels = np.asarray(levels, dtype=float)
    return PriceIndex(pd.bdate_range("2020-01-01", periods=len(levels) - 1), levels / levels[0])


def _rs(values):
    return ReturnSeries(pd.bdate_range("2020-01-01", periods=len(values)), values)


def _ewm_loop(x, window):
    a = 2.0 / (window + 1)
    out = np.empty(len(x))
    out[0] = x[0]
    for t in range(1, len(x)):
        out[t] = a * x[t] + (1 - a) * out[t - 1]
    return out


class TestEwma:
    def test_constant(self):
        assert np.allclose(ewma(np.full(10, 3.5), 8), 3.5, atol=1e-15)

    def test_two_points(self):
        assert np.allclose(ewma([1.0, 0.0], 3), [1.0, 0.5])

    def test_matches_recursion(self, rng):
        x = rng.normal(size=200)
        assert np.max(np.abs(ewma(x, 21) - _ewm_loop(x, 21))) < 1e-12

    def test_long_window_approaches_first_value_weighting(self):
        # as alpha -> 0 the output stays near the seed value on a short series
        x = np.array([1.0, 2.0, 3.0])
        assert abs(ewma(x, 10**7)[-1] - 1.0) < 1e-5

    def test_errors(self):
        with pytest.raises(DataError):
            ewma([], 5)
        with pytest.raises(ValueError):
            ewma([1.0], 1)


class TestIndicators:
    def test_rsi_increasing(self):
        assert np.allclose(rsi(_index(np.linspace(1, 2, 30)), 8), 100)

    def test_rsi_decreasing(self):
        assert np.allclose(rsi(_index(np.linspace(2, 1, 30)), 8), 0)

    def test_rsi_alternating(self):
        lv = 1.0 + 0.01 * (np.arange(400) % 2)
        d = np.diff(lv)
        up, dn = _ewm_loop(np.maximum(d, 0), 63), _ewm_loop(np.maximum(-d, 0), 63)
        oracle = 100 * up / (up + dn)
        out = rsi(_index(lv), 63)
        assert np.max(np.abs(out - oracle)) < 1e-9
        assert abs(out[-1] - 50) < 1.0

    def test_rsi_flat_is_50(self):
        assert np.all(rsi(_index(np.ones(10)), 8) == 50)

    def test_stoch_extremes(self):
        up = stochastic_k(_index(np.linspace(1, 2, 30)), 8)
        dn = stochastic_k(_index(np.linspace(2, 1, 30)), 8)
        assert np.allclose(up, 100) and np.allclose(dn, 0)

    def test_stoch_flat(self):
        assert np.all(stochastic_k(_index(np.ones(10)), 8) == 50)

    def test_stoch_rolling_oracle(self, rng):
        lv = np.cumprod(1 + rng.normal(0, 0.01, 50))
        idx = _index(lv)
        out = stochastic_k(idx, 8)
        P = idx.levels
        for t in range(1, len(P)):
            w = P[max(0, t - 7) : t + 1]
            assert out[t - 1] == pytest.approx(100 * (P[t] - w.min()) / (w.max() - w.min()), abs=1e-10)

    def test_macd_constant_and_rising(self):
        assert np.allclose(macd(_index(np.ones(40)), 8, 21), 0)
        assert np.all(macd(_index(np.linspace(1, 2, 40)), 8, 21)[1:] > 0)

    def test_macd_oracle(self, rng):
        P = np.cumprod(1 + 0.001 + rng.normal(0, 0.01, 61))
        P = P / P[0]
        oracle = 100 * (_ewm_loop(P, 8) - _ewm_loop(P, 21)) / P
        assert np.max(np.abs(macd(_index(P), 8, 21) - oracle[1:])) < 1e-10

    def test_macd_window_order(self):
        with pytest.raises(ValueError):
            macd(_index(np.ones(5)), 21, 8)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 50))
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(0)
        lv = np.cumprod(1 + rng.normal(0, 0.01, 80))
        a = PriceIndex(pd.bdate_range("2020-01-01", periods=80), np.r_[1.0, lv[1:] / lv[0]])
        b_levels = a.levels * c
        # rescaled copy of the index; PriceIndex itself insists on level 1.0 first
        class Scaled:
            levels = b_levels
        assert np.allclose(rsi(a, 21), rsi(Scaled, 21), atol=1e-9)
        assert np.allclose(stochastic_k(a, 21), stochastic_k(Scaled, 21), atol=1e-9)
        assert np.allclose(macd(a, 8, 21), macd(Scaled, 8, 21), atol=1e-9)

    def test_downside_nonnegative_returns_floor(self):
        out = log_downside_deviation(_rs(np.abs(np.random.default_rng(1).normal(0, 0.01, 30))), 21)
        assert np.allclose(out, np.log(1e-8))

    def test_downside_symmetric_matches_vol(self, rng):
        r = rng.choice([-0.01, 0.01], size=10_000)
        dd = downside_deviation(_rs(r), 10_000 // 2)
        ann = np.sqrt(2) * np.sqrt(252) * dd[-1]
        vol = np.sqrt(252) * r.std()
        assert abs(ann / vol - 1) < 0.05

    def test_beta_identity_and_linearity(self, rng):
        m = rng.normal(0, 0.01, 100)
        assert np.allclose(active_beta(_rs(m), _rs(m), 21)[5:], 1.0)
        assert np.allclose(active_beta(_rs(-0.5 * m), _rs(m), 21)[5:], -0.5)

    def test_beta_independent_noise(self, rng):
        m = rng.normal(0, 0.01, 5000)
        a = rng.normal(0, 0.01, 5000)
        slope = np.polyfit(m, a, 1)[0]
        b = active_beta(_rs(a), _rs(m), 2000)
        assert abs(b[-1] - slope) < 0.1 and abs(b[-1]) < 0.1

    def test_beta_zero_variance(self):
        assert np.all(active_beta(_rs(np.full(10, 0.01)), _rs(np.zeros(10)), 5) == 0)


def _sim(T=400, seed=3):
    return simulate(HmmSpec(T=T, seed=seed))


class TestBuildFeatures:
    def test_seventeen_named_columns(self):
        s = _sim()
        fm = build_features(s.active, s.market, s.env)
        assert len(fm.names) == 17
        assert fm.names == tuple(f.name for f in feature_specs())
        assert len(fm) == 400 - 63
        assert np.all(np.isfinite(fm.X))

    def test_neutral_values_on_flat_input(self):
        T = 100
        d = pd.bdate_range("2020-01-01", periods=T)
        z = ReturnSeries(d, np.zeros(T))
        env = AlignedPanel(pd.DataFrame({"vix": 20.0, "y2": 2.0, "y10": 3.0}, index=d), ("vix", "y2", "y10"))
        fm = build_features(z, z, env).to_frame()
        for c in ("r_factor_8", "r_factor_21", "r_factor_63", "macd_8_21", "macd_21_63", "beta_21", "r_mkt_21",
                  "r_vix_21", "y2_diff_21", "y10y2_diff_21"):
            assert np.all(fm[c] == 0), c
        for c in ("rsi_8", "rsi_21", "rsi_63", "stoch_k_8", "stoch_k_21", "stoch_k_63"):
            assert np.all(fm[c] == 50), c

    def test_missing_env_column(self):
        s = _sim()
        with pytest.raises(DataError, match="y2"):
            build_features(s.active, s.market, s.env.select(["vix", "y10"]))

    def test_slope_column_alternative(self):
        s = _sim()
        f = s.env.frame
        env2 = AlignedPanel(pd.DataFrame({"vix": f.vix, "y2": f.y2, "y10y2": f.y10 - f.y2}), ("vix", "y2", "y10y2"))
        a = build_features(s.active, s.market, s.env)
        b = build_features(s.active, s.market, env2)
        assert np.allclose(a.X, b.X, atol=1e-10)

    def test_env_gaps_forward_filled(self):
        s = _sim()
        f = s.env.frame.copy()
        f.iloc[100, f.columns.get_loc("y2")] = np.nan
        fm = build_features(s.active, s.market, AlignedPanel(f, s.env.raw_columns))
        assert np.all(np.isfinite(fm.X))

    def test_window_override(self):
        s = _sim()
        fm = build_features(s.active, s.market, s.env, windows={"return": (5, 10, 40), "rsi": (5, 10, 40),
                                                                  "stoch_k": (5, 10, 40), "macd": ((5, 10), (10, 40))})
        assert "r_factor_40" in fm.names and len(fm) == 400 - 40

    def test_causal_under_truncation(self):
        s = _sim(T=500)
        full = build_features(s.active, s.market, s.env)
        rng = np.random.default_rng(7)
        for cut in rng.integers(80, 500, 10):
            d = s.active.dates[:cut]
            part = build_features(s.active.slice(None, d[-1] + 1), s.market.slice(None, d[-1] + 1),
                                  AlignedPanel(s.env.frame.iloc[:cut], s.env.raw_columns))
            assert np.array_equal(part.X, full.X[: len(part)])

    def test_csv_export(self, tmp_path):
        s = _sim()
        fm = build_features(s.active, s.market, s.env)
        fm.to_csv(tmp_path / "f.csv")
        back = pd.read_csv(tmp_path / "f.csv", index_col=0)
        assert list(back.columns) == list(fm.names)


class TestStandardize:
    def test_zscore(self, rng):
        fm = FeatureMatrix(pd.bdate_range("2020-01-01", periods=50), ("a", "b"), rng.normal(3, 2, (50, 2)))
        z = standardize(fm)
        assert np.allclose(z.X.mean(0), 0, atol=1e-10) and np.allclose(z.X.std(0), 1, atol=1e-10)

    def test_identity_stats(self, rng):
        fm = FeatureMatrix(pd.bdate_range("2020-01-01", periods=5), ("a", "b"), rng.normal(size=(5, 2)))
        assert np.array_equal(standardize(fm, FeatureStats(np.zeros(2), np.ones(2))).X, fm.X)

    def test_held_out_rows(self, rng):
        X = rng.normal(size=(60, 3))
        d = pd.bdate_range("2020-01-01", periods=60)
        train = standardize(FeatureMatrix(d[:40], ("a", "b", "c"), X[:40]))
        test = standardize(FeatureMatrix(d[40:], ("a", "b", "c"), X[40:]), train.stats)
        mu, sd = X[:40].mean(0), X[:40].std(0)
        assert np.allclose(test.X, (X[40:] - mu) / sd, atol=1e-14)

    def test_zero_std_floor(self, caplog):
        X = np.c_[np.ones(10), np.arange(10.0)]
        z = standardize(FeatureMatrix(pd.bdate_range("2020-01-01", periods=10), ("a", "b"), X))
        assert z.stats.std[0] == 1e-8 and np.all(z.X[:, 0] == 0)
        assert "zero-variance" in caplog.text

    def test_stats_round_trip(self, rng):
        s = FeatureStats(rng.normal(size=3), rng.uniform(1, 2, 3))
        t = FeatureStats.from_dict(s.to_dict())
        assert np.array_equal(s.mean, t.mean) and np.array_equal(s.std, t.std)
