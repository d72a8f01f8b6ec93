"""Regime features computed from factor active returns and market series.

Every transformation here is causal: the value on a date only uses data up
to and including that date.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd

from .market_data import (
    TRADING_DAYS,
    AlignedPanel,
    DataError,
    PriceIndex,
    ReturnSeries,
    _check_calendars,
    cumulative_index,
)

logger = logging.getLogger(__name__)

DD_EPS = 1e-8
STD_FLOOR = 1e-8
BETA_VAR_FLOOR = 1e-12

DEFAULT_WINDOWS = {
    "return": (8, 21, 63),
    "rsi": (8, 21, 63),
    "stoch_k": (8, 21, 63),
    "macd": ((8, 21), (21, 63)),
    "downside": 21,
    "beta": 21,
    "market": 21,
    "env": 21,
}

FEATURE_KINDS = (
    "ewma_return",
    "rsi",
    "stoch_k",
    "macd",
    "downside_dev_log",
    "active_beta",
    "mkt_return",
    "vix_logdiff",
    "y2_diff",
    "slope_diff",
)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    windows: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if any(w < 2 for w in self.windows):
            raise ValueError(f"{self.name}: windows must be >= 2")
        if self.kind == "macd":
            if len(self.windows) != 2 or self.windows[0] >= self.windows[1]:
                raise ValueError(f"{self.name}: MACD needs (short, long) with short < long")
        elif len(self.windows) != 1:
            raise ValueError(f"{self.name}: expected a single window")


def feature_specs(windows: Mapping | None = None) -> list[FeatureSpec]:
    """The 17 features in their canonical column order."""
    w = dict(DEFAULT_WINDOWS)
    if windows:
        unknown = set(windows) - set(w)
        if unknown:
            raise ValueError(f"unknown feature window keys: {sorted(unknown)}")
        w.update(windows)
    specs = [FeatureSpec(f"r_factor_{n}", "ewma_return", (n,)) for n in w["return"]]
    specs += [FeatureSpec(f"rsi_{n}", "rsi", (n,)) for n in w["rsi"]]
    specs += [FeatureSpec(f"stoch_k_{n}", "stoch_k", (n,)) for n in w["stoch_k"]]
    specs += [FeatureSpec(f"macd_{s}_{l}", "macd", (s, l)) for s, l in w["macd"]]
    specs += [
        FeatureSpec(f"log_dd_{w['downside']}", "downside_dev_log", (w["downside"],)),
        FeatureSpec(f"beta_{w['beta']}", "active_beta", (w["beta"],)),
        FeatureSpec(f"r_mkt_{w['market']}", "mkt_return", (w["market"],)),
        FeatureSpec(f"r_vix_{w['env']}", "vix_logdiff", (w["env"],)),
        FeatureSpec(f"y2_diff_{w['env']}", "y2_diff", (w["env"],)),
        FeatureSpec(f"y10y2_diff_{w['env']}", "slope_diff", (w["env"],)),
    ]
    return specs


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass(frozen=True)
class FeatureMatrix:
    """T x D feature observations with optional standardization stats."""

    dates: np.ndarray
    names: tuple[str, ...]
    X: np.ndarray
    stats: FeatureStats | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape != (len(self.dates), len(self.names)):
            raise DataError(f"feature matrix shape {X.shape} does not match dates/names")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dates", np.asarray(self.dates).astype("datetime64[D]"))

    def __len__(self) -> int:
        return self.X.shape[0]

    def rows(self, mask_or_slice) -> "FeatureMatrix":
        return FeatureMatrix(self.dates[mask_or_slice], self.names, self.X[mask_or_slice], self.stats)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.X, index=pd.DatetimeIndex(self.dates, name="date"), columns=list(self.names))

    def to_csv(self, path) -> None:
        df = self.to_frame()
        df.index = df.index.strftime("%Y-%m-%d")
        df.to_csv(path, float_format="%.12g")


def ewma(x, window: int) -> np.ndarray:
    """Exponentially weighted mean with span ``window``.

    Uses alpha = 2 / (window + 1) and the recursion
    ``y[t] = alpha * x[t] + (1 - alpha) * y[t-1]`` seeded with ``y[0] = x[0]``.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise DataError("ewma of an empty series")
    if window < 2:
        raise ValueError("window must be >= 2")
    # pandas with adjust=False runs exactly this recursion
    return pd.Series(x).ewm(span=window, adjust=False).mean().to_numpy()


def rsi(index: PriceIndex, window: int) -> np.ndarray:
    """Relative strength index in [0, 100], one value per return date."""
    dp = np.diff(index.levels)
    up = ewma(np.maximum(dp, 0.0), window)
    down = ewma(np.maximum(-dp, 0.0), window)
    total = up + down
    out = np.full_like(total, 50.0)
    ok = total > 0
    out[ok] = 100.0 * up[ok] / total[ok]
    return out


def stochastic_k(index: PriceIndex, window: int) -> np.ndarray:
    """%K over a trailing rolling window of index levels.

    The window is shorter during warm-up; a flat window gives 50.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    p = pd.Series(index.levels)
    roll = p.rolling(window, min_periods=1)
    lo = roll.min().to_numpy()
    hi = roll.max().to_numpy()
    rng = hi - lo
    out = np.full(len(p), 50.0)
    ok = rng > 0
    out[ok] = 100.0 * (p.to_numpy()[ok] - lo[ok]) / rng[ok]
    return out[1:]


def macd(index: PriceIndex, short: int, long: int) -> np.ndarray:
    """Short minus long EWMA of the index, as a percentage of the current level."""
    if short >= long:
        raise ValueError(f"MACD needs short < long, got ({short}, {long})")
    p = index.levels
    return (100.0 * (ewma(p, short) - ewma(p, long)) / p)[1:]


def downside_deviation(r: ReturnSeries, window: int) -> np.ndarray:
    """Daily downside deviation: sqrt of the EWMA of squared negative returns."""
    neg = np.minimum(r.values, 0.0)
    return np.sqrt(ewma(neg * neg, window))


def log_downside_deviation(r: ReturnSeries, window: int) -> np.ndarray:
    # sqrt(2) puts downside deviation on the scale of a full volatility
    dd = downside_deviation(r, window)
    return np.log(np.sqrt(2.0) * np.sqrt(TRADING_DAYS) * dd + DD_EPS)


def active_beta(active: ReturnSeries, market: ReturnSeries, window: int) -> np.ndarray:
    """EWM regression slope of active returns on market returns."""
    _check_calendars(active, market)
    a, m = active.values, market.values
    ma, mm = ewma(a, window), ewma(m, window)
    cov = ewma(a * m, window) - ma * mm
    var = ewma(m * m, window) - mm * mm
    out = np.zeros_like(var)
    ok = var > BETA_VAR_FLOOR
    out[ok] = cov[ok] / var[ok]
    return out


def _diff0(x: np.ndarray) -> np.ndarray:
    d = np.empty_like(x)
    d[0] = 0.0
    d[1:] = np.diff(x)
    return d


def _env_levels(env: AlignedPanel, dates: np.ndarray) -> dict[str, np.ndarray]:
    if not np.array_equal(env.dates, dates):
        raise DataError("environment panel calendar does not match the return series")
    for col in ("vix", "y2"):
        if col not in env:
            raise DataError(f"environment panel is missing column {col!r}")
    frame = env.frame.ffill()
    if "y10y2" in env:
        slope = frame["y10y2"].to_numpy(dtype=float)
    elif "y10" in env:
        slope = frame["y10"].to_numpy(dtype=float) - frame["y2"].to_numpy(dtype=float)
    else:
        raise DataError("environment panel needs 'y10y2' or 'y10'")
    vix = frame["vix"].to_numpy(dtype=float)
    y2 = frame["y2"].to_numpy(dtype=float)
    for name, arr in (("vix", vix), ("y2", y2), ("slope", slope)):
        if not np.all(np.isfinite(arr)):
            raise DataError(f"environment series {name!r} has leading missing values")
    if np.any(vix <= 0):
        raise DataError("VIX levels must be positive")
    return {"vix": vix, "y2": y2, "slope": slope}


def build_features(
    factor_active: ReturnSeries,
    market: ReturnSeries,
    env: AlignedPanel,
    *,
    windows: Mapping | None = None,
    warmup: int | None = None,
) -> FeatureMatrix:
    """Compute the raw (unstandardized) regime feature matrix.

    Parameters
    ----------
    factor_active : ReturnSeries
        Daily factor-minus-market returns.
    market : ReturnSeries
        Daily market excess returns on the same calendar.
    env : AlignedPanel
        Raw levels: ``vix``, ``y2`` (percent) and either ``y10y2`` or ``y10``.
    windows : mapping, optional
        Overrides for :data:`DEFAULT_WINDOWS`.
    warmup : int, optional
        Leading rows to drop; defaults to the longest window (63).
    """
    _check_calendars(factor_active, market)
    lv = _env_levels(env, factor_active.dates)
    specs = feature_specs(windows)
    idx = cumulative_index(factor_active)

    cols = []
    for spec in specs:
        w = spec.windows
        if spec.kind == "ewma_return":
            col = TRADING_DAYS * ewma(factor_active.values, w[0])
        elif spec.kind == "rsi":
            col = rsi(idx, w[0])
        elif spec.kind == "stoch_k":
            col = stochastic_k(idx, w[0])
        elif spec.kind == "macd":
            col = macd(idx, w[0], w[1])
        elif spec.kind == "downside_dev_log":
            col = log_downside_deviation(factor_active, w[0])
        elif spec.kind == "active_beta":
            col = active_beta(factor_active, market, w[0])
        elif spec.kind == "mkt_return":
            col = TRADING_DAYS * ewma(market.values, w[0])
        elif spec.kind == "vix_logdiff":
            col = ewma(_diff0(np.log(lv["vix"])), w[0])
        elif spec.kind == "y2_diff":
            col = TRADING_DAYS * ewma(_diff0(lv["y2"]), w[0])
        else:
            col = TRADING_DAYS * ewma(_diff0(lv["slope"]), w[0])
        cols.append(col)

    if warmup is None:
        warmup = max(max(s.windows) for s in specs)
    X = np.column_stack(cols)[warmup:]
    if len(X) == 0:
        raise DataError(f"series shorter than the {warmup}-day warm-up")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values after warm-up")
    return FeatureMatrix(factor_active.dates[warmup:], tuple(s.name for s in specs), X)


def standardize(fm: FeatureMatrix, stats: FeatureStats | None = None) -> FeatureMatrix:
    """Z-score each column, computing stats from ``fm`` unless given."""
    if stats is None:
        mean = fm.X.mean(axis=0)
        std = fm.X.std(axis=0)
        low = std < STD_FLOOR
        if np.any(low):
            logger.warning("zero-variance feature(s) %s; std floored", [fm.names[i] for i in np.flatnonzero(low)])
            std = np.where(low, STD_FLOOR, std)
        stats = FeatureStats(mean, std)
    elif len(stats.mean) != fm.X.shape[1]:
        raise DataError("standardization stats do not match feature count")
    return FeatureMatrix(fm.dates, fm.names, (fm.X - stats.mean) / stats.std, stats)
