"""Daily portfolio simulation with drift, costs and delayed rebalancing, plus metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .black_litterman import Equilibrium, build_views, ewm_covariance, target_tracking_error
from .market_data import TRADING_DAYS, DataError
from .strategy import DEFAULT_TC, RegimeSignal

logger = logging.getLogger(__name__)

TE_UNDEFINED = 1e-10


@dataclass(frozen=True)
class PortfolioPath:
    """Daily record of a simulated portfolio.

    ``weights[t]`` are the weights after any trade at the close of day
    ``t``; they earn day ``t + 1``. ``returns`` are net of costs and
    ``turnover[t]`` is the one-way turnover traded at the close of ``t``.
    """

    dates: np.ndarray
    assets: tuple[str, ...]
    weights: np.ndarray
    returns: np.ndarray
    gross: np.ndarray
    turnover: np.ndarray
    rebalances: tuple = ()

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.weights, index=pd.DatetimeIndex(self.dates, name="date"), columns=list(self.assets))
        df["gross"] = self.gross
        df["net"] = self.returns
        df["turnover"] = self.turnover
        return df


def _quarter_starts(dates) -> np.ndarray:
    q = pd.DatetimeIndex(dates).to_period("Q")
    return np.r_[True, q[1:] != q[:-1]]


def simulate_path(
    R: np.ndarray,
    dates,
    assets: Sequence[str],
    decide: Callable[[int, np.ndarray], np.ndarray | None],
    tc: float,
) -> PortfolioPath:
    """Run the daily drift/trade loop.

    ``decide(t, drifted)`` returns the target weights to trade into at the
    close of day ``t`` or None to let weights drift. The portfolio starts in
    cash, so day 0 earns nothing and its trade turns over the full target.
    """
    R = np.asarray(R, dtype=float)
    T, N = R.shape
    weights = np.empty((T, N))
    gross = np.zeros(T)
    turnover = np.zeros(T)
    post = np.zeros(N)
    trades = []
    for t in range(T):
        if t == 0:
            drifted = post
        else:
            growth = post * (1.0 + R[t])
            gross[t] = growth.sum() - 1.0
            drifted = growth / (1.0 + gross[t])
        target = decide(t, drifted)
        if target is not None:
            turnover[t] = np.abs(target - drifted).sum()
            post = np.asarray(target, dtype=float)
            trades.append(t)
        else:
            post = drifted
        weights[t] = post
    net = gross - tc * turnover
    return PortfolioPath(np.asarray(dates).astype("datetime64[D]"), tuple(assets), weights, net, gross, turnover, tuple(trades))


def _returns_matrix(panel, assets):
    frame = getattr(panel, "frame", panel)
    if assets is None:
        assets = list(frame.columns)
    missing = [a for a in assets if a not in frame.columns]
    if missing:
        raise DataError(f"panel is missing assets {missing}")
    return frame[list(assets)].to_numpy(dtype=float), frame.index, list(assets)


def ew_benchmark(panel, assets: Sequence[str] | None = None, tc: float = DEFAULT_TC) -> PortfolioPath:
    """Equal weights, reset at the first trading day of each calendar quarter."""
    R, idx, assets = _returns_matrix(panel, assets)
    if len(R) == 0:
        raise DataError("empty panel")
    N = len(assets)
    ew = np.full(N, 1.0 / N)
    qstart = _quarter_starts(idx)
    return simulate_path(R, idx.values, assets, lambda t, d: ew if qstart[t] else None, tc)


@dataclass(frozen=True)
class DynamicRun:
    path: PortfolioPath
    allocations: dict
    reasons: dict


def run_dynamic(
    panel,
    signals: Mapping[str, RegimeSignal],
    te_target: float,
    tc: float = DEFAULT_TC,
    *,
    assets: Sequence[str] | None = None,
    market: str = "market",
    start=None,
    rf=None,
    delta: float = 2.5,
    halflife: float = 126,
) -> DynamicRun:
    """Black-Litterman allocation driven by per-factor regime signals.

    A rebalance is decided at the close of day ``T`` when any factor's
    bull/bear label flips or ``T`` starts a calendar quarter; it uses data
    through ``T``, trades at the close of ``T + 1`` and earns from ``T + 2``.
    The portfolio is funded at equal weights at the close of the first day.

    Parameters
    ----------
    panel : AlignedPanel or DataFrame
        Daily total returns of the market and the factors. Rows before
        ``start`` only feed the covariance estimate.
    signals : mapping
        Factor name -> RegimeSignal covering every date from ``start``.
    rf : array-like, optional
        Annualized risk-free yield per panel row, for excess-return covariances.
    """
    R_all, idx, assets = _returns_matrix(panel, assets)
    if market not in assets:
        raise DataError(f"market column {market!r} not in assets")
    factors = [a for a in assets if a != market]
    i0 = 0 if start is None else int(idx.searchsorted(pd.Timestamp(start)))
    dates = idx.values[i0:].astype("datetime64[D]")
    T = len(dates)
    if T < 2:
        raise DataError("backtest needs at least two dates")
    mu = np.empty((T, len(factors)))
    for j, f in enumerate(factors):
        if f not in signals:
            raise DataError(f"missing signal for factor {f!r}")
        sig = signals[f]
        if not np.array_equal(sig.dates, dates):
            raise DataError(f"signal for {f!r} is not aligned with the backtest dates")
        mu[:, j] = sig.mu_hat
    X_ex = R_all.copy()
    if rf is not None:
        X_ex = X_ex - np.asarray(rf, dtype=float)[:, None] / TRADING_DAYS

    bull = mu > 0
    flips = np.r_[False, np.any(bull[1:] != bull[:-1], axis=1)]
    qstart = _quarter_starts(dates)
    N = len(assets)
    w_bmk = np.full(N, 1.0 / N)
    pending: dict[int, np.ndarray] = {}
    allocations = {}
    reasons = {}

    def decide(t, drifted):
        # decision at close of t -> executed at close of t + 1
        why = []
        if t == 0:
            why.append("initial")
        if flips[t]:
            why.append("signal")
        if qstart[t] and t > 0:
            why.append("quarterly")
        if why and t + 1 < T:
            hist = X_ex[: i0 + t + 1]
            sigma = ewm_covariance(hist, halflife) if len(hist) >= 2 else np.eye(N) * 1e-4
            eq = Equilibrium(sigma, w_bmk, delta)
            views = build_views(dict(zip(factors, mu[t])), assets, market)
            res = target_tracking_error(eq, views, te_target)
            pending[t + 1] = res.weights
            allocations[t] = res
            reasons[t] = tuple(why)
        if t == 0:
            return w_bmk
        return pending.pop(t, None)

    path = simulate_path(R_all[i0:], dates, assets, decide, tc)
    return DynamicRun(path, allocations, reasons)


def max_drawdown(returns) -> float:
    """Worst peak-to-trough loss of the compounded path (<= 0).

    The starting value 1.0 counts as a peak.
    """
    r = np.asarray(returns, dtype=float)
    if np.any(r <= -1):
        raise DataError("returns must exceed -1")
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    peak = np.maximum.accumulate(wealth)
    return float(min(0.0, np.min(wealth / peak - 1.0)))


@dataclass(frozen=True)
class PerformanceReport:
    excess_return: float
    excess_risk: float
    sharpe: float
    max_drawdown: float
    active_return: float | None
    tracking_error: float | None
    information_ratio: float | None
    turnover: float
    alpha: float
    beta: float
    alpha_t_stat: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def ols_alpha_beta(y, x):
    """Intercept, slope and intercept t-statistic of ``y`` on ``x``."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(y)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx <= 0:
        raise DataError("regressor has zero variance")
    beta = np.sum((x - xm) * (y - ym)) / sxx
    alpha = ym - beta * xm
    resid = y - alpha - beta * x
    s2 = resid @ resid / (n - 2) if n > 2 else np.nan
    se = np.sqrt(s2 * (1.0 / n + xm * xm / sxx))
    t = alpha / se if se > 0 else None
    return float(alpha), float(beta), (None if t is None else float(t))


def performance_report(
    returns,
    benchmark,
    market,
    rf=None,
    turnover=None,
) -> PerformanceReport:
    """Annualized performance statistics for a daily return path.

    ``returns``, ``benchmark`` and ``market`` are daily simple returns (or
    PortfolioPath objects); ``rf`` is the annualized risk-free yield per day.
    Turnover skips the day-0 funding trade.
    """
    if isinstance(returns, PortfolioPath):
        turnover = returns.turnover if turnover is None else turnover
        returns = returns.returns
    if isinstance(benchmark, PortfolioPath):
        benchmark = benchmark.returns
    r = np.asarray(returns, dtype=float)
    T = len(r)
    rf_d = np.zeros(T) if rf is None else np.asarray(rf, dtype=float) / TRADING_DAYS
    if len(rf_d) != T:
        raise DataError("risk-free series is not aligned")
    ex = r - rf_d
    mean, sd = ex.mean(), ex.std(ddof=1)
    # a constant series has rounding-level std; call its Sharpe ratio 0
    sharpe = 0.0 if np.all(ex == ex[0]) else float(mean / sd * np.sqrt(TRADING_DAYS))

    active = te = ir = None
    if benchmark is not None:
        b = np.asarray(benchmark, dtype=float)
        if len(b) != T:
            raise DataError("benchmark is not aligned")
        diff = r - b
        active = float(TRADING_DAYS * diff.mean())
        te = float(np.sqrt(TRADING_DAYS) * diff.std(ddof=1))
        ir = active / te if te >= TE_UNDEFINED else None

    m = np.asarray(market, dtype=float)
    if len(m) != T:
        raise DataError("market is not aligned")
    alpha, beta, t = ols_alpha_beta(ex, m - rf_d)
    to = 0.0 if turnover is None else float(np.sum(np.asarray(turnover)[1:]) * TRADING_DAYS / T)
    return PerformanceReport(
        excess_return=float(TRADING_DAYS * mean),
        excess_risk=float(np.sqrt(TRADING_DAYS) * sd),
        sharpe=sharpe,
        max_drawdown=max_drawdown(r),
        active_return=active,
        tracking_error=te,
        information_ratio=ir,
        turnover=to,
        alpha=TRADING_DAYS * alpha,
        beta=beta,
        alpha_t_stat=t,
    )
