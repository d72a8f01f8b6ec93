"""Loading, aligning and transforming daily return data."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

TRADING_DAYS = 252


class DataError(ValueError):
    """Raised for malformed or misaligned input data."""


def _as_dates(dates) -> np.ndarray:
    return np.asarray(pd.DatetimeIndex(dates).values.astype("datetime64[D]"))


@dataclass(frozen=True)
class ReturnSeries:
    """Dated daily simple returns.

    ``dates`` are strictly increasing ``datetime64[D]`` values and ``values``
    are decimal returns per day (0.01 is one percent).
    """

    dates: np.ndarray
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        dates = _as_dates(self.dates)
        values = np.asarray(self.values, dtype=float)
        if dates.shape != values.shape or values.ndim != 1:
            raise DataError(f"{self.name or 'series'}: dates and values must be 1-d and equal length")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise DataError(f"{self.name or 'series'}: dates must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataError(f"{self.name or 'series'}: missing or non-finite values")
        if np.any(values <= -1.0):
            raise DataError(f"{self.name or 'series'}: returns must exceed -1")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def to_series(self) -> pd.Series:
        return pd.Series(self.values, index=pd.DatetimeIndex(self.dates), name=self.name)

    def slice(self, start=None, stop=None) -> "ReturnSeries":
        """Rows with ``start <= date < stop``."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.dates >= np.datetime64(pd.Timestamp(start), "D")
        if stop is not None:
            mask &= self.dates < np.datetime64(pd.Timestamp(stop), "D")
        return ReturnSeries(self.dates[mask], self.values[mask], self.name)


@dataclass(frozen=True)
class PriceIndex:
    """Cumulative index levels starting at 1.0.

    ``levels`` has one more entry than the return series it was built from;
    ``dates`` holds the return dates, so ``levels[i + 1]`` is the level at
    the close of ``dates[i]``.
    """

    dates: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        if levels.size == 0 or levels[0] != 1.0:
            raise DataError("index must start at level 1.0")
        if np.any(levels <= 0):
            raise DataError("index levels must be positive")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "dates", _as_dates(self.dates))


@dataclass(frozen=True)
class AlignedPanel:
    """Several columns sharing one trading calendar.

    Return columns and raw-level columns (VIX, yields) live side by side in
    ``frame``; ``raw_columns`` names the latter.
    """

    frame: pd.DataFrame
    raw_columns: tuple[str, ...] = ()
    dropped_rows: int = 0

    def __post_init__(self):
        if not isinstance(self.frame.index, pd.DatetimeIndex):
            raise DataError("panel index must be a DatetimeIndex")
        if not self.frame.index.is_monotonic_increasing or self.frame.index.has_duplicates:
            raise DataError("panel dates must be strictly increasing")
        if self.frame.columns.has_duplicates:
            raise DataError("panel column names must be unique")

    @property
    def dates(self) -> np.ndarray:
        return _as_dates(self.frame.index)

    @property
    def columns(self) -> list[str]:
        return list(self.frame.columns)

    def __len__(self) -> int:
        return len(self.frame)

    def __contains__(self, name: str) -> bool:
        return name in self.frame.columns

    def series(self, name: str) -> ReturnSeries:
        if name not in self.frame.columns:
            raise DataError(f"panel has no column {name!r}")
        return ReturnSeries(self.dates, self.frame[name].to_numpy(dtype=float), name)

    def values(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise DataError(f"panel has no column {name!r}")
        return self.frame[name].to_numpy(dtype=float)

    def select(self, names: Sequence[str]) -> "AlignedPanel":
        missing = [n for n in names if n not in self.frame.columns]
        if missing:
            raise DataError(f"panel is missing columns {missing}")
        raw = tuple(n for n in self.raw_columns if n in names)
        return AlignedPanel(self.frame[list(names)].copy(), raw)

    def slice(self, start=None, stop=None) -> "AlignedPanel":
        idx = self.frame.index
        mask = np.ones(len(idx), dtype=bool)
        if start is not None:
            mask &= idx >= pd.Timestamp(start)
        if stop is not None:
            mask &= idx < pd.Timestamp(stop)
        return AlignedPanel(self.frame.loc[mask].copy(), self.raw_columns)

    def to_csv(self, path) -> None:
        out = self.frame.copy()
        out.index = out.index.strftime("%Y-%m-%d")
        out.index.name = "date"
        out.to_csv(path, float_format="%.12g")


def _read_one(path: Path, schema: Mapping[str, str] | None) -> pd.DataFrame:
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, comment="#")
    if "date" not in raw.columns:
        raise DataError(f"{path}: missing 'date' column")
    dates = pd.to_datetime(raw["date"], format="ISO8601", errors="coerce")
    bad = np.flatnonzero(dates.isna().to_numpy())
    if bad.size:
        raise DataError(f"{path}: unparseable date {raw['date'].iloc[bad[0]]!r} at row {bad[0]}")

    if schema is None:
        mapping = {c: c for c in raw.columns if c != "date"}
    else:
        mapping = {canon: col for canon, col in schema.items() if col in raw.columns}

    out = {}
    for canon, col in mapping.items():
        text = raw[col].str.strip()
        num = pd.to_numeric(text, errors="coerce")
        bad = np.flatnonzero((num.isna() & (text != "") & ~text.str.lower().isin(["nan", "na", "."])).to_numpy())
        if bad.size:
            raise DataError(f"{path}: non-numeric value {raw[col].iloc[bad[0]]!r} in column {col!r} at row {bad[0]}")
        out[canon] = num.to_numpy(dtype=float)
    frame = pd.DataFrame(out, index=pd.DatetimeIndex(dates.dt.normalize(), name="date"))
    if frame.index.has_duplicates:
        dup = frame.index[frame.index.duplicated()][0]
        raise DataError(f"{path}: duplicate date {dup.date()}")
    return frame.sort_index()


def load_panel(
    paths: str | Path | Iterable[str | Path],
    schema: Mapping[str, str] | None = None,
    *,
    input_kind: str = "returns",
    raw_columns: Iterable[str] = (),
) -> AlignedPanel:
    """Read one or more CSV files and inner-join them on date.

    Parameters
    ----------
    paths : path or list of paths
        CSV files, each with an ISO-8601 ``date`` column.
    schema : mapping, optional
        Panel column name -> CSV column name. Every schema entry must be
        found in some file. When omitted all non-date columns are kept.
    input_kind : {"returns", "levels"}
        Whether the non-raw columns hold daily returns or total-return
        levels. Levels are converted to simple returns after alignment,
        dropping the first date.
    raw_columns : iterable of str
        Market-environment level columns (VIX, yields). They are
        forward-filled within their file before the join and never
        converted to returns.
    """
    if input_kind not in ("returns", "levels"):
        raise DataError(f"input_kind must be 'returns' or 'levels', got {input_kind!r}")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    raw_columns = tuple(raw_columns)

    frames = []
    for p in paths:
        f = _read_one(Path(p), schema)
        ff = [c for c in f.columns if c in raw_columns]
        if ff:
            f[ff] = f[ff].ffill()
        frames.append(f)
    if not frames:
        raise DataError("no input files")

    seen: set[str] = set()
    for f in frames:
        dup = seen.intersection(f.columns)
        if dup:
            raise DataError(f"column(s) {sorted(dup)} appear in more than one file")
        seen.update(f.columns)
    if schema is not None:
        missing = [c for c in schema if c not in seen]
        if missing:
            raise DataError(f"schema columns not found in input: {missing}")

    frame = frames[0]
    for f in frames[1:]:
        frame = frame.join(f, how="inner")
    if frame.empty:
        raise DataError("no dates common to all input files")

    n_before = len(frame)
    frame = frame.dropna(how="any")
    dropped = n_before - len(frame)
    if dropped:
        logger.warning("dropped %d row(s) with missing values", dropped)
    if frame.empty:
        raise DataError("no complete rows after alignment")

    if input_kind == "levels":
        ret_cols = [c for c in frame.columns if c not in raw_columns]
        lv = frame[ret_cols]
        if (lv <= 0).any().any():
            raise DataError("index levels must be positive")
        frame[ret_cols] = lv / lv.shift(1) - 1.0
        frame = frame.iloc[1:]
        if frame.empty:
            raise DataError("need at least two dates to convert levels to returns")

    return AlignedPanel(frame, tuple(c for c in raw_columns if c in frame.columns), dropped)


def _check_calendars(a: ReturnSeries, b: ReturnSeries) -> None:
    if len(a) != len(b) or not np.array_equal(a.dates, b.dates):
        raise DataError(f"calendar mismatch between {a.name or 'series'} and {b.name or 'series'}")


def active_returns(factor: ReturnSeries, market: ReturnSeries) -> ReturnSeries:
    """Factor return minus market return, day by day."""
    _check_calendars(factor, market)
    return ReturnSeries(factor.dates, factor.values - market.values, f"{factor.name}_active")


def excess_returns(r: ReturnSeries, rf: ReturnSeries) -> ReturnSeries:
    """Subtract a risk-free rate quoted as an annualized decimal yield.

    The daily rate is ``rf / 252``. ``rf`` is passed as a ReturnSeries for
    calendar checking even though it holds yields, not returns.
    """
    _check_calendars(r, rf)
    return ReturnSeries(r.dates, r.values - rf.values / TRADING_DAYS, f"{r.name}_excess")


def cumulative_index(r: ReturnSeries) -> PriceIndex:
    """Compound daily returns into an index starting at 1.0."""
    return PriceIndex(r.dates, np.concatenate([[1.0], np.cumprod(1.0 + r.values)]))
