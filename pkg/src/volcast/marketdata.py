"""Minute-bar market data: containers, CSV I/O, a seeded synthetic generator,
and the per-day quantities the rest of the package benchmarks against."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BARS_PER_DAY = 390
MAX_MISSING_FRACTION = 0.05
VI_THRESHOLD = 0.10

BAR_HEADER = ("symbol", "date", "minute", "open", "high", "low", "close", "volume", "amount")
META_HEADER = ("symbol", "shares_outstanding", "market")


class DataError(ValueError):
    """Raised for malformed or inconsistent market data."""


class Market(str, Enum):
    KR = "KR"
    US = "US"
    SYNTH = "SYNTH"


@dataclass(frozen=True)
class MinuteBar:
    symbol: str
    date: dt.date
    minute_index: int
    open: float
    high: float
    low: float
    close: float
    volume: int
    amount: float

    def __post_init__(self):
        if not (self.low <= min(self.open, self.close) and max(self.open, self.close) <= self.high):
            raise DataError(f"{self.symbol} {self.date} minute {self.minute_index}: OHLC out of order")
        if self.volume < 0 or self.amount < 0:
            raise DataError(f"{self.symbol} {self.date} minute {self.minute_index}: negative volume/amount")
        if self.volume == 0 and self.amount != 0:
            raise DataError(f"{self.symbol} {self.date} minute {self.minute_index}: amount without volume")

    @property
    def typical_price(self) -> float:
        return (self.high + self.low + self.close) / 3.0


@dataclass(frozen=True)
class StockMeta:
    symbol: str
    shares_outstanding: int
    market: Market = Market.SYNTH

    def __post_init__(self):
        if self.shares_outstanding <= 0:
            raise DataError(f"{self.symbol}: shares_outstanding must be positive")


@dataclass(frozen=True, eq=False)
class TradingDay:
    """One stock's full session, stored column-wise.

    Arrays are length ``T`` and indexed by minute. ``bars`` materialises
    :class:`MinuteBar` objects on demand.
    """

    symbol: str
    date: dt.date
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    amount: np.ndarray

    def __post_init__(self):
        n = len(self.open)
        cols = {}
        for name in ("open", "high", "low", "close", "amount"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            cols[name] = arr
        cols["volume"] = np.array(self.volume, dtype=np.int64)
        for name, arr in cols.items():
            if arr.shape != (n,):
                raise DataError(f"{self.symbol} {self.date}: column {name} has shape {arr.shape}, want ({n},)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        o, h, l, c = cols["open"], cols["high"], cols["low"], cols["close"]
        if np.any(l > np.minimum(o, c)) or np.any(np.maximum(o, c) > h):
            raise DataError(f"{self.symbol} {self.date}: OHLC out of order")
        v, a = cols["volume"], cols["amount"]
        if np.any(v < 0) or np.any(a < 0) or np.any((v == 0) & (a != 0)):
            raise DataError(f"{self.symbol} {self.date}: invalid volume/amount")

    @property
    def n_bars(self) -> int:
        return len(self.open)

    @property
    def total_volume(self) -> int:
        return int(self.volume.sum())

    @property
    def typical_price(self) -> np.ndarray:
        return (self.high + self.low + self.close) / 3.0

    @property
    def bars(self) -> list[MinuteBar]:
        return [self.bar(i) for i in range(self.n_bars)]

    def bar(self, i: int) -> MinuteBar:
        return MinuteBar(
            self.symbol, self.date, i,
            float(self.open[i]), float(self.high[i]), float(self.low[i]), float(self.close[i]),
            int(self.volume[i]), float(self.amount[i]),
        )

    @classmethod
    def from_bars(cls, bars: Sequence[MinuteBar]) -> "TradingDay":
        if not bars:
            raise DataError("a trading day needs at least one bar")
        idx = [b.minute_index for b in bars]
        if idx != list(range(len(bars))):
            raise DataError(f"{bars[0].symbol} {bars[0].date}: minute indices must be 0..{len(bars) - 1}")
        return cls(
            bars[0].symbol, bars[0].date,
            [b.open for b in bars], [b.high for b in bars], [b.low for b in bars], [b.close for b in bars],
            [b.volume for b in bars], [b.amount for b in bars],
        )

    def equals(self, other: "TradingDay") -> bool:
        return (
            self.symbol == other.symbol
            and self.date == other.date
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("open", "high", "low", "close", "volume", "amount")
            )
        )


# -- per-day quantities ---------------------------------------------------


def day_vwap(day: TradingDay) -> float:
    """Volume-weighted typical price over the session."""
    total = day.volume.sum()
    if total <= 0:
        raise DataError(f"{day.symbol} {day.date}: VWAP undefined for a zero-volume day")
    return float(np.dot(day.typical_price, day.volume) / total)


def detect_vi(day: TradingDay, threshold: float = VI_THRESHOLD) -> bool:
    """Volatility-interruption flag: session high/low 10% or more away from the open."""
    ref = day.open[0]
    up, down = (1.0 + threshold) * ref, (1.0 - threshold) * ref
    hi, lo = float(day.high.max()), float(day.low.min())
    # a price exactly at the threshold counts, whatever the rounding of the product
    return bool(hi >= up or math.isclose(hi, up, rel_tol=1e-12)
                or lo <= down or math.isclose(lo, down, rel_tol=1e-12))


def turnover_rate(bar: MinuteBar, meta: StockMeta) -> float:
    return bar.volume / meta.shares_outstanding


# -- CSV I/O --------------------------------------------------------------


@dataclass
class LoadResult:
    days: list[TradingDay]
    rejected: list[tuple[str, dt.date, int]] = field(default_factory=list)
    filled_minutes: int = 0
    missing_days: int = 0

    @property
    def warnings(self) -> int:
        return len(self.rejected) + self.missing_days


def read_meta(path: str | Path) -> dict[str, StockMeta]:
    out: dict[str, StockMeta] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != META_HEADER:
            raise DataError(f"{path}: expected header {','.join(META_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(META_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(META_HEADER)} columns, got {len(row)}")
            try:
                meta = StockMeta(row[0], int(row[1]), Market(row[2]))
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            out[meta.symbol] = meta
    return out


def write_meta(path: str | Path, metas: Iterable[StockMeta]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_HEADER)
        for m in sorted(metas, key=lambda m: m.symbol):
            w.writerow([m.symbol, m.shares_outstanding, m.market.value])


def _parse_row(row: list[str], path, lineno: int):
    if len(row) != len(BAR_HEADER):
        raise DataError(f"{path}:{lineno}: expected {len(BAR_HEADER)} columns, got {len(row)}")
    try:
        return (
            row[0], dt.date.fromisoformat(row[1]), int(row[2]),
            float(row[3]), float(row[4]), float(row[5]), float(row[6]),
            int(row[7]), float(row[8]),
        )
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: {exc}") from None


def load_minute_bars(
    path: str | Path, meta: dict[str, StockMeta], bars_per_day: int = BARS_PER_DAY
) -> LoadResult:
    """Read a minute-bar CSV into complete sessions.

    Days missing more than 5% of their minutes are rejected. Smaller gaps
    become zero-volume bars priced at the previous close (or, for leading
    gaps, the first observed open). Weekdays absent between a symbol's first
    and last dates are counted in ``missing_days``.
    """
    groups: dict[tuple[str, dt.date], dict[int, tuple]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != BAR_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(BAR_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            rec = _parse_row(row, path, lineno)
            symbol, date, minute = rec[0], rec[1], rec[2]
            if symbol not in meta:
                raise DataError(f"{path}:{lineno}: unknown symbol {symbol!r}")
            if not 0 <= minute < bars_per_day:
                raise DataError(f"{path}:{lineno}: minute {minute} outside [0, {bars_per_day})")
            day_rows = groups.setdefault((symbol, date), {})
            if minute in day_rows:
                raise DataError(f"{path}:{lineno}: duplicate minute {minute} for {symbol} {date}")
            try:
                MinuteBar(*rec)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            day_rows[minute] = rec

    result = LoadResult(days=[])
    max_missing = math.floor(MAX_MISSING_FRACTION * bars_per_day)
    for (symbol, date) in sorted(groups):
        rows = groups[(symbol, date)]
        missing = bars_per_day - len(rows)
        if missing > max_missing:
            result.rejected.append((symbol, date, missing))
            logger.warning("rejecting %s %s: %d of %d minutes missing", symbol, date, missing, bars_per_day)
            continue
        cols = np.zeros((6, bars_per_day))
        first = min(rows)
        prev_close = rows[first][3]
        for m in range(bars_per_day):
            rec = rows.get(m)
            if rec is None:
                cols[:, m] = (prev_close, prev_close, prev_close, prev_close, 0, 0.0)
                result.filled_minutes += 1
            else:
                cols[:, m] = rec[3:]
                prev_close = rec[6]
        result.days.append(TradingDay(symbol, date, *cols[:4], cols[4].astype(np.int64), cols[5]))

    by_symbol: dict[str, list[dt.date]] = {}
    for symbol, date in groups:
        by_symbol.setdefault(symbol, []).append(date)
    for dates in by_symbol.values():
        present = set(dates)
        lo, hi = min(dates), max(dates)
        span = np.arange(np.datetime64(lo), np.datetime64(hi) + 1)
        weekdays = [d.astype(dt.date) for d in span if np.is_busday(d)]
        result.missing_days += sum(1 for d in weekdays if d not in present)
    return result


def write_minute_bars(path: str | Path, days: Iterable[TradingDay]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BAR_HEADER)
        for day in sorted(days, key=lambda d: (d.symbol, d.date)):
            iso = day.date.isoformat()
            for m in range(day.n_bars):
                w.writerow([
                    day.symbol, iso, m,
                    repr(float(day.open[m])), repr(float(day.high[m])), repr(float(day.low[m])),
                    repr(float(day.close[m])), int(day.volume[m]), repr(float(day.amount[m])),
                ])


# -- synthetic generator --------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_stocks: int = 10
    n_days: int = 60
    bars_per_day: int = BARS_PER_DAY
    u_shape_depth: float = 3.0
    noise_sigma: float = 0.3
    spike_rate: float = 2.0
    spike_scale: float = 5.0
    price_vol: float = 0.001
    seed: int = 0
    base_volume: float = 20_000.0
    start_date: dt.date = dt.date(2023, 1, 2)

    def __post_init__(self):
        if self.n_stocks < 1 or self.n_days < 1 or self.bars_per_day < 2:
            raise ValueError("n_stocks, n_days must be >= 1 and bars_per_day >= 2")
        if self.u_shape_depth <= 0 or self.spike_scale <= 0 or self.base_volume <= 0:
            raise ValueError("u_shape_depth, spike_scale and base_volume must be positive")
        if self.noise_sigma < 0 or self.spike_rate < 0 or self.price_vol < 0:
            raise ValueError("noise_sigma, spike_rate and price_vol must be nonnegative")


def u_shape_profile(bars_per_day: int, depth: float) -> np.ndarray:
    """Quadratic intensity: 1 at minute ``T // 2``, ``depth`` at minute 0."""
    mid = bars_per_day // 2
    m = np.arange(bars_per_day)
    return 1.0 + (depth - 1.0) * ((m - mid) / mid) ** 2


def trading_dates(start: dt.date, n: int) -> list[dt.date]:
    first = np.busday_offset(np.datetime64(start), 0, roll="forward")
    return [d.astype(dt.date) for d in np.busday_offset(first, np.arange(n))]


def _symbol(i: int) -> str:
    return f"S{i:03d}"


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[TradingDay], dict[str, StockMeta]]:
    """Seeded U-shaped volume with log-normal noise and Poisson spikes,
    over a geometric random walk in price. Days are ordered by (symbol, date).
    """
    days, metas, _ = generate_synthetic_with_spikes(cfg)
    return days, metas


def generate_synthetic_with_spikes(cfg: SyntheticConfig):
    """Like :func:`generate_synthetic`, also returning the planted spike minutes
    as a dict keyed by ``(symbol, date)`` (sorted minute indices)."""
    rng = np.random.default_rng(cfg.seed)
    T = cfg.bars_per_day
    profile = u_shape_profile(T, cfg.u_shape_depth)
    dates = trading_dates(cfg.start_date, cfg.n_days)
    days: list[TradingDay] = []
    metas: dict[str, StockMeta] = {}
    spikes: dict[tuple[str, dt.date], np.ndarray] = {}
    tick = 0.01
    for s in range(cfg.n_stocks):
        symbol = _symbol(s)
        level = cfg.base_volume * float(np.exp(rng.normal(0.0, 0.5)))
        shares = int(round(level * T * 250 * float(np.exp(rng.normal(0.0, 0.3)))))
        metas[symbol] = StockMeta(symbol, shares, Market.SYNTH)
        price = float(np.round(rng.uniform(20.0, 200.0), 2))
        for date in dates:
            intensity = level * profile
            if cfg.noise_sigma > 0:
                intensity = intensity * np.exp(rng.normal(0.0, cfg.noise_sigma, T))
            n_spikes = min(int(rng.poisson(cfg.spike_rate)), T)
            spikes[(symbol, date)] = np.zeros(0, dtype=np.int64)
            if n_spikes:
                where = rng.choice(T, size=n_spikes, replace=False)
                mult = cfg.spike_scale * np.exp(rng.normal(0.0, 0.25, n_spikes))
                intensity[where] *= mult
                spikes[(symbol, date)] = np.sort(where)
            volume = np.rint(intensity).astype(np.int64)

            rets = rng.normal(0.0, cfg.price_vol, T) if cfg.price_vol > 0 else np.zeros(T)
            close = np.round(price * np.exp(np.cumsum(rets)), 2)
            close = np.maximum(close, tick)
            open_ = np.concatenate([[price], close[:-1]])
            wick = np.abs(rng.normal(0.0, cfg.price_vol / 2.0, (2, T))) if cfg.price_vol > 0 else np.zeros((2, T))
            high = np.round(np.maximum(open_, close) * np.exp(wick[0]), 2)
            low = np.maximum(np.round(np.minimum(open_, close) * np.exp(-wick[1]), 2), tick)
            high = np.maximum(high, np.maximum(open_, close))
            low = np.minimum(low, np.minimum(open_, close))
            amount = np.round(volume * (high + low + close) / 3.0, 2)
            days.append(TradingDay(symbol, date, open_, high, low, close, volume, amount))
            price = float(close[-1])
    return days, metas, spikes


def iter_by_symbol(days: Iterable[TradingDay]) -> Iterator[tuple[str, list[TradingDay]]]:
    """Group days per symbol (sorted), each list sorted by date."""
    groups: dict[str, list[TradingDay]] = {}
    for d in days:
        groups.setdefault(d.symbol, []).append(d)
    for symbol in sorted(groups):
        yield symbol, sorted(groups[symbol], key=lambda d: d.date)
