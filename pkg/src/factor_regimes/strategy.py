"""Regime signals, the single-factor long-short evaluation, and walk-forward tuning."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .features import FeatureMatrix, standardize
from .jump_model import (
    JumpModelConfig,
    JumpModelFit,
    OnlineState,
    fit_sparse_jump_model,
    infer_sequence,
    label_states,
)
from .market_data import TRADING_DAYS, DataError, ReturnSeries, _check_calendars

logger = logging.getLogger(__name__)

MU_CAP = 0.05
DEFAULT_TC = 0.0005
SIGNAL_DELAY = 2


@dataclass(frozen=True)
class RegimeSignal:
    """Per-date inferred state and its capped expected annual active return."""

    dates: np.ndarray
    state: np.ndarray
    mu_hat: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates).astype("datetime64[D]")
        state = np.asarray(self.state, dtype=np.int64)
        mu = np.asarray(self.mu_hat, dtype=float)
        if not (len(dates) == len(state) == len(mu)):
            raise DataError("signal fields must have equal length")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise DataError("signal dates must be strictly increasing")
        if np.any(np.abs(mu) > MU_CAP + 1e-15):
            raise DataError("expected returns must be capped at +/-5%")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "mu_hat", mu)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def bull(self) -> np.ndarray:
        return self.mu_hat > 0

    def slice(self, start=None, stop=None) -> "RegimeSignal":
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.dates >= np.datetime64(pd.Timestamp(start), "D")
        if stop is not None:
            mask &= self.dates < np.datetime64(pd.Timestamp(stop), "D")
        return RegimeSignal(self.dates[mask], self.state[mask], self.mu_hat[mask])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"state": self.state, "mu_hat": self.mu_hat},
            index=pd.DatetimeIndex(self.dates, name="date"),
        )

    def to_dict(self) -> dict:
        return {
            "dates": [str(d) for d in self.dates],
            "state": self.state.tolist(),
            "mu_hat": self.mu_hat.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "RegimeSignal":
        return cls(np.array(d["dates"], dtype="datetime64[D]"), d["state"], d["mu_hat"])

    @classmethod
    def concat(cls, parts: Sequence["RegimeSignal"]) -> "RegimeSignal":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.array([], dtype="datetime64[D]"), [], [])
        return cls(
            np.concatenate([p.dates for p in parts]),
            np.concatenate([p.state for p in parts]),
            np.concatenate([p.mu_hat for p in parts]),
        )


def expected_active_return(train_states, train_active, current_state: int, cap: float = MU_CAP) -> float:
    """Annualized mean training active return in ``current_state``, capped."""
    states = np.asarray(train_states)
    active = np.asarray(getattr(train_active, "values", train_active), dtype=float)
    if len(states) != len(active):
        raise DataError("training states and active returns are not aligned")
    mask = states == current_state
    if not mask.any():
        return 0.0
    return float(np.clip(TRADING_DAYS * active[mask].mean(), -cap, cap))


def position_size(mu_hat, cap: float = MU_CAP):
    """Linear position in the factor-minus-market portfolio, saturating at +/-cap."""
    return np.clip(np.asarray(mu_hat, dtype=float) / cap, -1.0, 1.0)


def sharpe_ratio(returns) -> float:
    """Annualized mean/std of daily returns; 0 for a constant series."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        return 0.0
    if np.all(r == r[0]):
        return 0.0
    sd = r.std(ddof=1)
    return float(r.mean() / sd * np.sqrt(TRADING_DAYS))


def count_shifts(signal: RegimeSignal) -> float:
    """Bull/bear flips per year, with bull meaning a positive expected return."""
    if len(signal) < 2:
        return 0.0
    flips = np.count_nonzero(np.diff(signal.bull.astype(np.int8)))
    return flips / (len(signal) / TRADING_DAYS)


@dataclass(frozen=True)
class LongShortResult:
    returns: np.ndarray
    gross: np.ndarray
    positions: np.ndarray
    daily_turnover: np.ndarray
    sharpe: float
    shifts_per_year: float
    turnover: float

    def summary(self) -> dict:
        return {"sharpe": self.sharpe, "shifts_per_year": self.shifts_per_year, "turnover": self.turnover}


def long_short_ledger(mu_hat, active, tc: float = DEFAULT_TC, delay: int = SIGNAL_DELAY):
    """Daily ledger of the factor-minus-market strategy.

    The position earning day ``t`` is sized from ``mu_hat[t - delay]``; it
    is traded at the close of day ``t - 1``, so that day carries the cost.
    Both legs trade, so moving the position by ``x`` turns over ``2|x|``.

    Returns
    -------
    positions, gross, turnover, net : ndarray
    """
    mu = np.asarray(mu_hat, dtype=float)
    a = np.asarray(active, dtype=float)
    T = len(a)
    if len(mu) != T:
        raise DataError("signal and returns must be aligned")
    if T <= delay:
        raise DataError(f"need more than {delay} observations")
    pos = np.zeros(T)
    pos[delay:] = position_size(mu[: T - delay])
    gross = pos * a
    turnover = np.zeros(T)
    turnover[:-1] = 2.0 * np.abs(pos[1:] - pos[:-1])
    net = gross - tc * turnover
    return pos, gross, turnover, net


def run_long_short(
    signal: RegimeSignal,
    factor: ReturnSeries,
    market: ReturnSeries,
    tc: float = DEFAULT_TC,
) -> LongShortResult:
    """Evaluate a regime signal by trading the factor against the market."""
    _check_calendars(factor, market)
    if not np.array_equal(signal.dates, factor.dates):
        raise DataError("signal calendar does not match the return series")
    return _long_short(signal, factor.values - market.values, tc)


def _long_short(signal: RegimeSignal, active, tc: float) -> LongShortResult:
    pos, gross, turnover, net = long_short_ledger(signal.mu_hat, active, tc)
    return LongShortResult(
        returns=net,
        gross=gross,
        positions=pos,
        daily_turnover=turnover,
        sharpe=sharpe_ratio(net),
        shifts_per_year=count_shifts(signal),
        turnover=float(turnover.sum() * TRADING_DAYS / len(net)),
    )


# --- walk-forward tuning ---------------------------------------------------


@dataclass(frozen=True)
class TuningSchedule:
    """Spans for the walk-forward hyperparameter search."""

    train_min_years: float = 8
    train_max_years: float = 12
    refit_months: int = 1
    validation_years: float = 6
    reselect_months: int = 6
    test_start: str = "2007-01-01"
    test_end: str | None = None

    def __post_init__(self):
        if self.train_min_years > self.train_max_years:
            raise ValueError("train_min_years must not exceed train_max_years")
        if min(self.train_min_years, self.refit_months, self.validation_years, self.reselect_months) <= 0:
            raise ValueError("schedule spans must be positive")


@dataclass(frozen=True)
class TuningGrid:
    lambdas: tuple[float, ...] = (10.0, 20.0, 35.0, 50.0, 75.0, 100.0, 150.0)
    kappa_sqs: tuple[float, ...] = (3.0, 5.5, 9.5, 14.0, 17.0)

    def __post_init__(self):
        if not self.lambdas or not self.kappa_sqs:
            raise ValueError("grid must be nonempty")
        if any(l < 0 for l in self.lambdas) or any(k < 1 for k in self.kappa_sqs):
            raise ValueError("invalid grid values")
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "kappa_sqs", tuple(float(x) for x in self.kappa_sqs))

    def cells(self) -> list[tuple[float, float]]:
        """Cells sorted by (lambda, kappa_sq), the tie-break order."""
        return sorted((l, k) for l in set(self.lambdas) for k in set(self.kappa_sqs))


def _years(y: float) -> pd.DateOffset:
    months = int(round(12 * y))
    return pd.DateOffset(months=months)


def _to_ts(d) -> pd.Timestamp:
    return pd.Timestamp(d)


def period_starts(dates: np.ndarray, start, months: int) -> np.ndarray:
    """Indices of the first trading date of every ``months``-month period from ``start``."""
    idx = pd.DatetimeIndex(dates)
    start = _to_ts(start)
    out = []
    t = start
    while True:
        pos = idx.searchsorted(t)
        if pos >= len(idx):
            break
        if not out or pos > out[-1]:
            out.append(int(pos))
        t = t + pd.DateOffset(months=months)
    return np.asarray(out, dtype=np.int64)


def month_starts(dates: np.ndarray, start_index: int = 0) -> np.ndarray:
    """Index of ``start_index`` plus the first trading day of each later month."""
    idx = pd.DatetimeIndex(dates)
    period = idx.to_period("M")
    first = np.flatnonzero(np.r_[True, period[1:] != period[:-1]])
    first = first[first > start_index]
    return np.r_[start_index, first].astype(np.int64)


@dataclass(frozen=True)
class RefitResult:
    """One monthly refit and the online signal it produced until the next one."""

    date: np.datetime64
    fit: JumpModelFit
    mu_by_state: np.ndarray


def regime_path(
    features: FeatureMatrix,
    active: ReturnSeries,
    config: JumpModelConfig,
    start,
    stop=None,
    *,
    schedule: TuningSchedule = TuningSchedule(),
    keep_fits: bool = False,
):
    """Online signal from monthly refits over ``[start, stop)``.

    At each refit date the model is trained on raw features strictly before
    that date (an expanding window clipped to ``train_max_years``, at least
    ``train_min_years`` long), standardized with training-only statistics.
    Until the next refit, each new day is filtered with the centroids held
    fixed, continuing from the training sample's terminal DP values.

    Parameters
    ----------
    features : FeatureMatrix
        Raw (unstandardized) features.
    active : ReturnSeries
        Active returns on the same dates as ``features``.
    """
    if not np.array_equal(features.dates, active.dates):
        raise DataError("features and active returns must share dates")
    dates = features.dates
    i0 = int(np.searchsorted(dates, np.datetime64(_to_ts(start), "D")))
    i1 = len(dates) if stop is None else int(np.searchsorted(dates, np.datetime64(_to_ts(stop), "D")))
    if i0 >= i1:
        raise DataError("empty signal range")
    refits = month_starts(dates[: i1], i0)
    refits = refits[refits < i1]
    if schedule.refit_months > 1:
        refits = refits[:: schedule.refit_months]

    first = _to_ts(dates[0])
    state = np.empty(i1 - i0, dtype=np.int64)
    mu = np.empty(i1 - i0)
    fits = []
    bounds = list(refits) + [i1]
    for r, nxt in zip(bounds[:-1], bounds[1:]):
        r_date = _to_ts(dates[r])
        if r_date - _years(schedule.train_min_years) < first:
            raise DataError(
                f"insufficient history for refit on {r_date.date()}: need {schedule.train_min_years} years of features"
            )
        lo = int(np.searchsorted(dates, np.datetime64(r_date - _years(schedule.train_max_years), "D")))
        train = standardize(features.rows(slice(lo, r)))
        fit = fit_sparse_jump_model(train, config)
        train_active = active.values[lo:r]
        labels = label_states(fit, train_active)
        fit = replace(fit, labels=labels)
        mu_by_state = np.array([expected_active_return(fit.states, train_active, k) for k in range(fit.K)])
        X_new = fit.prepare(features.X[r:nxt])
        s, _ = infer_sequence(fit, X_new, OnlineState.from_fit(fit))
        state[r - i0 : nxt - i0] = s
        mu[r - i0 : nxt - i0] = mu_by_state[s]
        if keep_fits:
            fits.append(RefitResult(dates[r], fit, mu_by_state))
    signal = RegimeSignal(dates[i0:i1], state, mu)
    return (signal, fits) if keep_fits else signal


@dataclass(frozen=True)
class BlockSelection:
    block_start: np.datetime64
    lam: float
    kappa_sq: float
    validation_sharpe: float
    scores: dict


@dataclass(frozen=True)
class TuningResult:
    selections: list
    signal: RegimeSignal


def tune_hyperparameters(
    features: FeatureMatrix,
    active: ReturnSeries,
    grid: TuningGrid = TuningGrid(),
    schedule: TuningSchedule = TuningSchedule(),
    base_config: JumpModelConfig = JumpModelConfig(),
    *,
    tc: float = DEFAULT_TC,
    threads: int = 1,
) -> TuningResult:
    """Walk-forward selection of (lambda, kappa_sq) by validation Sharpe.

    Every ``reselect_months`` from ``test_start``, each grid cell is scored
    by the long-short Sharpe ratio of its online signal over the preceding
    ``validation_years``; the best cell (ties to smaller lambda, then
    smaller kappa_sq) supplies the signal for the next block. A cell's
    online signal on a date depends only on that date's monthly refit, so
    each cell's path is computed once and shared by all blocks.
    """
    if not np.array_equal(features.dates, active.dates):
        raise DataError("features and active returns must share dates")
    dates = features.dates
    test_start = _to_ts(schedule.test_start)
    end = _to_ts(schedule.test_end) if schedule.test_end else _to_ts(dates[-1]) + pd.Timedelta(days=1)
    path_start = test_start - _years(schedule.validation_years)
    if _to_ts(dates[0]) + _years(schedule.train_min_years) > path_start:
        raise DataError(
            "insufficient history: need train_min_years + validation_years of features before test_start"
        )
    if test_start >= end or np.searchsorted(dates, np.datetime64(test_start, "D")) >= len(dates):
        raise DataError("no data in the test period")

    cells = grid.cells()

    def run_cell(cell):
        lam, ksq = cell
        cfg = replace(base_config, lam=lam, kappa_sq=ksq)
        return regime_path(features, active, cfg, path_start, end, schedule=schedule)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            paths = list(ex.map(run_cell, cells))
    else:
        paths = [run_cell(c) for c in cells]

    path_active = active.slice(path_start, end).values
    block_idx = period_starts(paths[0].dates, test_start, schedule.reselect_months)
    block_dates = [paths[0].dates[i] for i in block_idx]
    selections = []
    parts = []
    for bi, b in enumerate(block_dates):
        b_ts = _to_ts(b)
        v_lo = np.datetime64(b_ts - _years(schedule.validation_years), "D")
        win = (paths[0].dates >= v_lo) & (paths[0].dates < b)
        scores = {}
        best = None
        for cell, path in zip(cells, paths):
            mu = path.mu_hat[win]
            sr = sharpe_ratio(long_short_ledger(mu, path_active[win], tc)[3]) if mu.size > SIGNAL_DELAY else 0.0
            scores[cell] = sr
            if best is None or sr > scores[best]:
                best = cell
        selections.append(BlockSelection(b, best[0], best[1], scores[best], scores))
        b_end = block_dates[bi + 1] if bi + 1 < len(block_dates) else None
        parts.append(paths[cells.index(best)].slice(b, b_end))
        logger.info("block %s: lambda=%g kappa_sq=%g sharpe=%.3f", b, best[0], best[1], scores[best])
    return TuningResult(selections, RegimeSignal.concat(parts))
