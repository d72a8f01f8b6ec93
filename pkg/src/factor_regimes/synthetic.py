"""Simulated regime data with known ground truth."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .market_data import TRADING_DAYS, AlignedPanel, ReturnSeries

FACTORS = ("value", "size", "momentum", "quality", "low_vol", "growth")
START_DATE = "2000-01-03"


@dataclass(frozen=True)
class HmmSpec:
    """Two-state Markov chain with Gaussian daily returns.

    ``mu`` and ``vol`` are annualized; state 0 starts the chain.
    ``p_stay = 1`` freezes a state, which is allowed for testing.
    """

    p_stay: tuple[float, float] = (0.998, 0.998)
    mu: tuple[float, float] = (0.10, -0.10)
    vol: tuple[float, float] = (0.06, 0.06)
    T: int = 6000
    seed: int = 0
    start_state: int = 0

    def __post_init__(self):
        if any(not 0 < p <= 1 for p in self.p_stay):
            raise ValueError("p_stay must lie in (0, 1]")
        if any(v <= 0 for v in self.vol):
            raise ValueError("vol must be positive")
        if self.T < 2:
            raise ValueError("T must be at least 2")


@dataclass(frozen=True)
class Simulation:
    active: ReturnSeries
    states: np.ndarray
    market: ReturnSeries
    env: AlignedPanel


def _markov_chain(p_stay, T, start, rng) -> np.ndarray:
    u = rng.random(T)
    s = np.empty(T, dtype=np.int64)
    s[0] = start
    for t in range(1, T):
        s[t] = s[t - 1] if u[t] < p_stay[s[t - 1]] else 1 - s[t - 1]
    return s


def _env_levels(T, rng) -> dict[str, np.ndarray]:
    # VIX: mean-reverting log level; yields: random walks in percent
    z = rng.standard_normal((3, T))
    logv = np.empty(T)
    logv[0] = np.log(20.0)
    for t in range(1, T):
        logv[t] = logv[t - 1] + 0.02 * (np.log(20.0) - logv[t - 1]) + 0.06 * z[0, t]
    y2 = 2.0 + np.cumsum(0.04 * z[1])
    slope = 1.0 + np.cumsum(0.03 * z[2])
    return {"vix": np.exp(logv), "y2": y2, "y10": y2 + slope}


def simulate(spec: HmmSpec = HmmSpec()) -> Simulation:
    """Regime-switching active returns plus independent companion series.

    The market is i.i.d. normal (7%/yr drift, 16%/yr vol) and the
    environment series are random walks unrelated to the regimes.
    """
    rng = np.random.default_rng(spec.seed)
    states = _markov_chain(spec.p_stay, spec.T, spec.start_state, rng)
    mu = np.asarray(spec.mu) / TRADING_DAYS
    vol = np.asarray(spec.vol) / np.sqrt(TRADING_DAYS)
    active = mu[states] + vol[states] * rng.standard_normal(spec.T)
    market = 0.07 / TRADING_DAYS + 0.16 / np.sqrt(TRADING_DAYS) * rng.standard_normal(spec.T)
    env = _env_levels(spec.T, rng)
    dates = pd.bdate_range(START_DATE, periods=spec.T)
    frame = pd.DataFrame(env, index=pd.DatetimeIndex(dates, name="date"))
    return Simulation(
        ReturnSeries(dates, active, "active"),
        states,
        ReturnSeries(dates, market, "market"),
        AlignedPanel(frame, ("vix", "y2", "y10")),
    )


@dataclass(frozen=True)
class Universe:
    """Market, factor and auxiliary series with per-factor true states."""

    panel: AlignedPanel
    states: dict


def simulate_universe(
    T: int = 6000,
    seed: int = 0,
    factors: Sequence[str] = FACTORS,
    p_stay: tuple[float, float] = (0.998, 0.998),
    mu: tuple[float, float] = (0.10, -0.10),
    vol: tuple[float, float] = (0.06, 0.06),
    rf: float = 0.02,
) -> Universe:
    """A seven-index style universe: each factor = market + its own regime-switching active return.

    Columns: ``market``, one per factor, ``rf`` (annualized decimal yield,
    constant) and the raw environment levels ``vix``, ``y2``, ``y10``.
    """
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(factors) + 1)
    rng = np.random.default_rng(children[0])
    market = 0.07 / TRADING_DAYS + 0.16 / np.sqrt(TRADING_DAYS) * rng.standard_normal(T)
    env = _env_levels(T, rng)
    cols = {"market": market}
    states = {}
    for f, child in zip(factors, children[1:]):
        r = np.random.default_rng(child)
        start = int(r.integers(2))
        s = _markov_chain(p_stay, T, start, r)
        m = np.asarray(mu) / TRADING_DAYS
        v = np.asarray(vol) / np.sqrt(TRADING_DAYS)
        cols[f] = market + m[s] + v[s] * r.standard_normal(T)
        states[f] = s
    cols["rf"] = np.full(T, rf)
    cols.update(env)
    dates = pd.bdate_range(START_DATE, periods=T)
    frame = pd.DataFrame(cols, index=pd.DatetimeIndex(dates, name="date"))
    return Universe(AlignedPanel(frame, ("rf", "vix", "y2", "y10")), states)


def balanced_accuracy(truth, predicted) -> float:
    """Mean per-class recall under the best relabeling of ``predicted``."""
    truth = np.asarray(truth)
    predicted = np.asarray(predicted)
    if truth.shape != predicted.shape:
        raise ValueError("truth and predictions differ in length")
    classes = np.unique(truth)
    labels = np.union1d(classes, np.unique(predicted))
    best = 0.0
    for perm in itertools.permutations(labels):
        mapping = dict(zip(labels, perm))
        mapped = np.vectorize(mapping.get)(predicted) if len(predicted) else predicted
        score = np.mean([np.mean(mapped[truth == c] == c) for c in classes])
        best = max(best, float(score))
    return best
