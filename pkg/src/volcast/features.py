"""Model inputs and targets built from trading days.

Targets are log volume ratios ``y_t = ln(T * v_t / V_day)``. Windows slide
over each stock's concatenated minutes; with sixty 390-minute days per stock
there are tens of thousands of windows, so :class:`WindowSet` builds them
lazily and in batches.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .marketdata import DataError, StockMeta, TradingDay, iter_by_symbol

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-6
TIME_DIMS = 8
VOLUME_FEATURES = ("log_volume", "acc_volume_fraction", "turnover_bp", "log_amount")
N_FEATURES = len(VOLUME_FEATURES) + TIME_DIMS


@dataclass(frozen=True)
class RatioSeries:
    symbol: str
    date: dt.date
    y: np.ndarray


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def ratio_transform(day: TradingDay, floor: float = RATIO_FLOOR) -> RatioSeries:
    total = float(day.volume.sum())
    if total <= 0:
        raise DataError(f"{day.symbol} {day.date}: zero-volume day has no volume ratios")
    T = day.n_bars
    share = np.maximum(day.volume / total, floor)
    return RatioSeries(day.symbol, day.date, np.log(T * share))


def zscore(x) -> tuple[np.ndarray, NormStats]:
    """Standardise along axis 0 with the population std; constant columns map to 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("zscore of an empty series")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    z = np.where(sd > 0, (x - mu) / safe, 0.0)
    return z, NormStats(np.asarray(mu), np.asarray(sd))


def time_encoding(minute_index, T: int, date: dt.date | Sequence[dt.date]) -> np.ndarray:
    """``[m/T, sin(2πm/T), cos(2πm/T), weekday one-hot (Mon..Fri)]``.

    Vectorised over ``minute_index``; weekend dates get an all-zero one-hot.
    """
    m = np.asarray(minute_index, dtype=np.float64)
    phase = 2.0 * np.pi * m / T
    out = np.zeros(m.shape + (TIME_DIMS,))
    out[..., 0] = m / T
    out[..., 1] = np.sin(phase)
    out[..., 2] = np.cos(phase)
    if isinstance(date, dt.date):
        wd = np.full(m.shape, date.weekday())
    else:
        wd = np.asarray([d.weekday() for d in date]).reshape(m.shape)
    for k in range(5):
        out[..., 3 + k] = wd == k
    return out


@dataclass(frozen=True)
class FeatureWindow:
    stock_id: int
    context: np.ndarray          # (C, N_FEATURES)
    time_enc_future: np.ndarray  # (H, TIME_DIMS)
    target: np.ndarray           # (H,)
    norm_stats: NormStats
    symbol: str = ""
    start: int = 0
    target_date: dt.date | None = None

    def __post_init__(self):
        for name in ("context", "time_enc_future", "target"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"window {self.symbol}@{self.start}: non-finite {name}")


@dataclass
class _StockSeries:
    symbol: str
    stock_id: int
    raw: np.ndarray        # (L, 4): log1p volume, volume, turnover bp, log1p amount
    day_start: np.ndarray  # (L,) index of the first minute of each minute's day
    time: np.ndarray       # (L, TIME_DIMS)
    y: np.ndarray          # (L,)
    dates: list[dt.date]
    bars_per_day: int

    @property
    def length(self) -> int:
        return len(self.y)


def _stock_series(symbol: str, stock_id: int, days: list[TradingDay], meta: StockMeta) -> _StockSeries:
    T = days[0].n_bars
    vol = np.concatenate([d.volume for d in days]).astype(np.float64)
    amt = np.concatenate([d.amount for d in days])
    raw = np.stack([np.log1p(vol), vol, vol / meta.shares_outstanding * 1e4, np.log1p(amt)], axis=1)
    L = len(vol)
    day_start = (np.arange(L) // T) * T
    minutes = np.tile(np.arange(T), len(days))
    time = time_encoding(minutes, T, [d.date for d in days for _ in range(T)])
    y = np.concatenate([ratio_transform(d).y for d in days])
    return _StockSeries(symbol, stock_id, raw, day_start, time, y, [d.date for d in days], T)


class WindowSet(Sequence[FeatureWindow]):
    """Lazy, ordered collection of sliding windows, sorted by (symbol, start)."""

    def __init__(self, series: list[_StockSeries], context_len: int, horizon: int,
                 index: np.ndarray | None = None):
        self.series = series
        self.context_len = context_len
        self.horizon = horizon
        if index is None:
            parts = []
            for k, s in enumerate(series):
                n = s.length - context_len - horizon + 1
                if n > 0:
                    parts.append(np.stack([np.full(n, k), np.arange(n)], axis=1))
            index = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
        self.index = np.asarray(index, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(np.arange(len(self))[i])
        k, start = self.index[i]
        b = self.batch([i])
        s = self.series[k]
        return FeatureWindow(
            stock_id=int(b["stock_id"][0]), context=b["context"][0], time_enc_future=b["time_future"][0],
            target=b["target"][0], norm_stats=NormStats(b["norm_mean"][0], b["norm_std"][0]),
            symbol=s.symbol, start=int(start), target_date=self.target_date(i),
        )

    def __iter__(self) -> Iterator[FeatureWindow]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, positions) -> "WindowSet":
        return WindowSet(self.series, self.context_len, self.horizon, self.index[np.asarray(positions, dtype=np.int64)])

    def target_date(self, i: int) -> dt.date:
        k, start = self.index[i]
        s = self.series[k]
        return s.dates[(start + self.context_len + self.horizon - 1) // s.bars_per_day]

    def target_dates(self) -> list[dt.date]:
        return [self.target_date(i) for i in range(len(self))]

    def day_positions(self, symbol: str, date: dt.date) -> tuple[np.ndarray, np.ndarray]:
        """Windows whose first target minute falls on ``date``.

        Returns ``(positions, minutes)``: the window positions and the
        minute-of-day each one forecasts first, ascending.
        """
        for k, s in enumerate(self.series):
            if s.symbol == symbol:
                break
        else:
            raise KeyError(symbol)
        if date not in s.dates:
            raise KeyError(f"{symbol} has no session on {date}")
        first = s.dates.index(date) * s.bars_per_day - self.context_len
        rows = np.flatnonzero((self.index[:, 0] == k) & (self.index[:, 1] >= first)
                              & (self.index[:, 1] < first + s.bars_per_day))
        return rows, self.index[rows, 1] - first

    def keys(self) -> list[tuple[str, int]]:
        return [(self.series[k].symbol, int(st)) for k, st in self.index]

    def batch(self, positions) -> dict[str, np.ndarray]:
        """Stacked arrays for the windows at ``positions``.

        Volume and amount are z-scored against the context segment only;
        the accumulated fraction restarts at every day boundary inside the
        context and is divided by the context's total volume.
        """
        C, H = self.context_len, self.horizon
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        B = len(positions)
        ctx = np.empty((B, C, N_FEATURES))
        fut = np.empty((B, H, TIME_DIMS))
        tgt = np.empty((B, H))
        sid = np.empty(B, dtype=np.int64)
        nmean = np.empty((B, 2))
        nstd = np.empty((B, 2))
        for j, p in enumerate(positions):
            k, start = self.index[p]
            s = self.series[k]
            seg = slice(start, start + C)
            raw = s.raw[seg]
            z, stats = zscore(raw[:, [0, 3]])
            vol = raw[:, 1]
            total = vol.sum()
            # cumulative volume restarted at each day boundary inside the context
            cum = np.cumsum(vol)
            ds = s.day_start[seg]
            first = np.maximum(ds - start, 0)
            base = np.where(first > 0, cum[first - 1], 0.0)
            acc = (cum - base) / total if total > 0 else np.zeros(C)
            ctx[j, :, 0] = z[:, 0]
            ctx[j, :, 1] = acc
            ctx[j, :, 2] = raw[:, 2]
            ctx[j, :, 3] = z[:, 1]
            ctx[j, :, 4:] = s.time[seg]
            fut[j] = s.time[start + C : start + C + H]
            tgt[j] = s.y[start + C : start + C + H]
            sid[j] = s.stock_id
            nmean[j], nstd[j] = stats.mean, stats.std
        return {"context": ctx, "time_future": fut, "target": tgt, "stock_id": sid,
                "norm_mean": nmean, "norm_std": nstd}


def stock_vocabulary(metas: dict[str, StockMeta] | Sequence[str]) -> dict[str, int]:
    return {s: i for i, s in enumerate(sorted(metas))}


def build_windows(
    days: Sequence[TradingDay],
    meta: dict[str, StockMeta],
    context_len: int = 390,
    horizon: int = 3,
    vocabulary: dict[str, int] | None = None,
) -> WindowSet:
    """Sliding windows over each stock's minute series (``L - C - H + 1`` per stock)."""
    if context_len < 1 or horizon < 1:
        raise ValueError("context_len and horizon must be >= 1")
    vocab = vocabulary if vocabulary is not None else stock_vocabulary(meta)
    series = []
    for symbol, sdays in iter_by_symbol(days):
        if len({d.n_bars for d in sdays}) != 1:
            raise DataError(f"{symbol}: sessions of different lengths")
        series.append(_stock_series(symbol, vocab[symbol], sdays, meta[symbol]))
    return WindowSet(series, context_len, horizon)


@dataclass
class DatasetSplit:
    train: WindowSet
    validation: WindowSet
    test: WindowSet


def split_by_date(windows: WindowSet, train_end: dt.date, val_end: dt.date) -> DatasetSplit:
    """Chronological partition on each window's last target date (ends inclusive)."""
    if not train_end < val_end:
        raise ValueError("train_end must precede val_end")
    dates = np.array(windows.target_dates(), dtype="datetime64[D]")
    tr = np.flatnonzero(dates <= np.datetime64(train_end))
    va = np.flatnonzero((dates > np.datetime64(train_end)) & (dates <= np.datetime64(val_end)))
    te = np.flatnonzero(dates > np.datetime64(val_end))
    for name, part in (("train", tr), ("validation", va), ("test", te)):
        if len(part) == 0:
            logger.warning("empty %s partition", name)
    return DatasetSplit(windows.subset(tr), windows.subset(va), windows.subset(te))


def day_fraction_cutoffs(windows: WindowSet, train: float = 0.7, validation: float = 0.15) -> tuple[dt.date, dt.date]:
    """``(train_end, val_end)`` at date quantiles of the available target dates."""
    dates = sorted(set(windows.target_dates()))
    if len(dates) < 3:
        raise ValueError("need at least three distinct target dates to split")
    i_tr = max(0, min(len(dates) - 3, math.ceil(train * len(dates)) - 1))
    i_va = max(i_tr + 1, min(len(dates) - 2, math.ceil((train + validation) * len(dates)) - 1))
    return dates[i_tr], dates[i_va]


def split_by_day_fraction(windows: WindowSet, train: float = 0.7, validation: float = 0.15) -> DatasetSplit:
    """Convenience split at date quantiles of the available target dates."""
    return split_by_date(windows, *day_fraction_cutoffs(windows, train, validation))
