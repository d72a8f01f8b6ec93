"""Shared builders for tests that need a simulated factor history."""

import json
from pathlib import Path

import numpy as np

from factor_regimes.features import build_features
from factor_regimes.market_data import ReturnSeries
from factor_regimes.strategy import TuningSchedule
from factor_regimes.synthetic import simulate_universe

FIXTURES = Path(__file__).parent / "fixtures"

# short spans so walk-forward runs take seconds
SMALL_SCHEDULE = TuningSchedule(train_min_years=2, train_max_years=3, refit_months=1, validation_years=1,
                                reselect_months=6, test_start="2004-07-01")


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


def factor_inputs(T=1600, seed=0, factor="value", p_stay=(0.995, 0.995), mu=(0.25, -0.25)):
    uni = simulate_universe(T=T, seed=seed, factors=[factor], p_stay=p_stay, mu=mu)
    panel = uni.panel
    m = panel.series("market")
    f = panel.series(factor)
    rf = panel.values("rf")
    act = ReturnSeries(f.dates, f.values - m.values, "active")
    mex = ReturnSeries(m.dates, m.values - rf / 252, "mex")
    fm = build_features(act, mex, panel.select(["vix", "y2", "y10"]))
    keep = np.isin(act.dates, fm.dates)
    return uni, fm, ReturnSeries(act.dates[keep], act.values[keep], "active")
