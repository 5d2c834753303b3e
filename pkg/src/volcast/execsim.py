"""Bar-level simulator for a VWAP-tracking limit-order schedule.

The schedule rests passive limit orders at the bar-implied best bid (buys) or
ask (sells) until 30 minutes before the close, sweeps the unfilled residue
with a market order there, keeps quoting the remaining schedule, and sweeps
everything left 10 minutes before the close.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .marketdata import TradingDay, day_vwap, detect_vi

TICK = 0.01
LEDGER_HEADER = ("symbol", "date", "side", "qty", "avg_exec", "vwap", "perf_bp", "vi_flag")


class Side(str, Enum):
    BUY = "BUY"
    SELL = "SELL"


class OrderKind(str, Enum):
    LIMIT = "LIMIT"
    MARKET = "MARKET"


@dataclass(frozen=True)
class ExecutionPlan:
    symbol: str
    date: dt.date
    side: Side
    total_qty: int
    per_minute_qty: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.per_minute_qty, dtype=np.int64)
        if np.any(q < 0):
            raise ValueError("per-minute quantities must be nonnegative")
        if int(q.sum()) != self.total_qty:
            raise ValueError(f"schedule sums to {int(q.sum())}, expected {self.total_qty}")
        object.__setattr__(self, "per_minute_qty", q)
        object.__setattr__(self, "side", Side(self.side))


@dataclass(frozen=True)
class Order:
    minute: int
    side: Side
    qty: int
    kind: OrderKind
    limit_price: float | None = None

    def __post_init__(self):
        if self.qty <= 0:
            raise ValueError("order quantity must be positive")
        if (self.kind is OrderKind.LIMIT) != (self.limit_price is not None):
            raise ValueError("limit orders, and only limit orders, carry a limit price")


@dataclass(frozen=True)
class Fill:
    minute: int
    qty: int
    price: float
    kind: OrderKind


@dataclass(frozen=True)
class FillModelConfig:
    participation_cap: float = 0.1
    market_slippage_bp: float = 2.0
    first_sweep_offset: int = 30
    final_sweep_offset: int = 10
    tick: float = TICK

    def __post_init__(self):
        if not 0.0 < self.participation_cap <= 1.0:
            raise ValueError("participation_cap must lie in (0, 1]")
        if self.market_slippage_bp < 0:
            raise ValueError("market_slippage_bp must be nonnegative")
        if not 0 <= self.final_sweep_offset <= self.first_sweep_offset:
            raise ValueError("sweep offsets must satisfy 0 <= final <= first")


@dataclass
class SimResult:
    symbol: str
    date: dt.date
    side: Side
    total_qty: int
    filled_qty: int
    avg_price: float
    vwap: float
    perf_bp: float
    fills: list[Fill] = field(default_factory=list)
    used_first_sweep: bool = False
    used_final_sweep: bool = False
    vi_day: bool = False
    capacity_shortfall: bool = False
    undefined_perf: bool = False


def allocate_quantity(pred_ratios, total_qty: int) -> np.ndarray:
    """Largest-remainder apportionment; equal remainders go to earlier minutes."""
    r = np.asarray(pred_ratios, dtype=np.float64)
    if total_qty < 0:
        raise ValueError("total_qty must be nonnegative")
    if r.ndim != 1 or len(r) == 0 or np.any(~np.isfinite(r)) or np.any(r <= 0):
        raise ValueError("ratios must be a nonempty vector of positive finite numbers")
    quota = total_qty * (r / r.sum())
    base = np.floor(quota).astype(np.int64)
    # rounding removes last-bit noise so mathematically equal remainders tie
    frac = np.round(quota - base, 12)
    short = total_qty - int(base.sum())
    order = np.argsort(-frac, kind="stable")
    base[order[:short]] += 1
    return base


def perf_bp(avg_exec: float, vwap: float, side: Side | str) -> float:
    """Signed basis points versus VWAP; positive means the execution beat it."""
    if avg_exec <= 0 or vwap <= 0:
        raise ValueError("prices must be positive")
    side = Side(side)
    diff = vwap - avg_exec if side is Side.BUY else avg_exec - vwap
    return diff / vwap * 1e4


def simulate_day(day: TradingDay, plan: ExecutionPlan, cfg: FillModelConfig = FillModelConfig()) -> SimResult:
    T = day.n_bars
    if len(plan.per_minute_qty) != T or plan.symbol != day.symbol or plan.date != day.date:
        raise ValueError(f"plan for {plan.symbol} {plan.date} does not match day {day.symbol} {day.date}")
    side = plan.side
    buy = side is Side.BUY
    vwap = day_vwap(day)
    result = SimResult(day.symbol, day.date, side, plan.total_qty, 0, float("nan"), vwap, float("nan"),
                       vi_day=detect_vi(day))
    if plan.total_qty == 0:
        result.undefined_perf = True
        return result

    first = T - cfg.first_sweep_offset
    final = T - cfg.final_sweep_offset
    if first < 0:
        raise ValueError(f"session of {T} bars is shorter than the first sweep offset")
    slip = cfg.market_slippage_bp / 1e4
    caps = np.floor(cfg.participation_cap * day.volume).astype(np.int64)
    result.capacity_shortfall = int(caps.sum()) < plan.total_qty
    fills: list[Fill] = []
    open_qty = 0
    done = 0

    def sweep(minute: int, qty: int) -> None:
        bar = min(minute, T - 1)
        tp = day.typical_price[bar]
        fills.append(Fill(minute, qty, float(tp * (1.0 + slip) if buy else tp * (1.0 - slip)), OrderKind.MARKET))

    for m in range(final):
        if m == first and open_qty > 0:
            sweep(m, open_qty)
            done += open_qty
            open_qty = 0
            result.used_first_sweep = True
        open_qty += int(plan.per_minute_qty[m])
        if open_qty == 0:
            continue
        half = cfg.tick / 2.0
        limit = day.open[m] - half if buy else day.open[m] + half
        crossed = day.low[m] < limit if buy else day.high[m] > limit
        if crossed and caps[m] > 0:
            q = min(open_qty, int(caps[m]))
            fills.append(Fill(m, q, float(limit), OrderKind.LIMIT))
            open_qty -= q
            done += q
    remaining = plan.total_qty - done
    if remaining > 0:
        sweep(final, remaining)
        result.used_final_sweep = True

    qty = np.array([f.qty for f in fills], dtype=np.float64)
    px = np.array([f.price for f in fills])
    result.fills = fills
    result.filled_qty = int(qty.sum())
    result.avg_price = float(qty @ px / qty.sum())
    result.perf_bp = perf_bp(result.avg_price, vwap, side)
    return result


# -- aggregation ----------------------------------------------------------


@dataclass
class PerfSummary:
    n: int
    mean_bp: float
    median_bp: float
    std_bp: float
    beat_ratio: float
    top20_bp: float
    bottom20_bp: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ExecutionSummary:
    overall: PerfSummary
    by_side: dict[str, PerfSummary]
    undefined: int = 0

    def to_dict(self) -> dict:
        return {"overall": self.overall.to_dict(),
                "by_side": {k: v.to_dict() for k, v in self.by_side.items()},
                "undefined": self.undefined}

    def table(self) -> str:
        o = self.overall
        lines = [
            f"Average Execution Performance (bp): {o.mean_bp:.2f}",
            f"Standard Deviation (bp): {o.std_bp:.2f}",
            f"Market VWAP Beat Ratio: {o.beat_ratio:.2%}",
            f"Top 20% Performance (bp): {o.top20_bp:.2f}",
            f"Bottom 20% Performance (bp): {o.bottom20_bp:.2f}",
            "",
            f"{'Metric':<26}{'Buy Orders':>12}{'Sell Orders':>13}",
        ]
        buy, sell = self.by_side.get("BUY"), self.by_side.get("SELL")

        def cell(s, attr):
            return f"{getattr(s, attr):.2f}" if s is not None else "n/a"

        lines.append(f"{'Average Performance (bp)':<26}{cell(buy, 'mean_bp'):>12}{cell(sell, 'mean_bp'):>13}")
        lines.append(f"{'Standard Deviation (bp)':<26}{cell(buy, 'std_bp'):>12}{cell(sell, 'std_bp'):>13}")
        return "\n".join(lines)


def summarize_bp(values: Sequence[float]) -> PerfSummary:
    """Moments and tails of a bp sample; the tails average the ``ceil(0.2 n)`` extreme values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    if n == 0:
        raise ValueError("no performance values")
    k = math.ceil(0.2 * n)
    return PerfSummary(
        n=n, mean_bp=float(v.mean()), median_bp=float(np.median(v)), std_bp=float(v.std()),
        beat_ratio=float(np.mean(v > 0)), top20_bp=float(v[-k:].mean()), bottom20_bp=float(v[:k].mean()),
    )


def aggregate_stats(results: Sequence[SimResult]) -> ExecutionSummary:
    defined = [r for r in results if not r.undefined_perf]
    if not defined:
        raise ValueError("no results with a defined performance")
    by_side = {}
    for side in Side:
        vals = [r.perf_bp for r in defined if r.side is side]
        if vals:
            by_side[side.value] = summarize_bp(vals)
    return ExecutionSummary(summarize_bp([r.perf_bp for r in defined]), by_side, len(results) - len(defined))


@dataclass
class VIStressReport:
    vi: ExecutionSummary | None
    non_vi: ExecutionSummary | None
    n_vi: int
    n_non_vi: int

    @property
    def vi_empty(self) -> bool:
        return self.vi is None

    def to_dict(self) -> dict:
        return {
            "vi": self.vi.to_dict() if self.vi else None,
            "non_vi": self.non_vi.to_dict() if self.non_vi else None,
            "n_vi": self.n_vi, "n_non_vi": self.n_non_vi, "vi_empty": self.vi_empty,
        }

    def table(self) -> str:
        """Average / median / std rows for ASK (sell) and BID (buy), VI and non-VI side by side."""
        cols = [("VI ASK", self.vi, "SELL"), ("VI BID", self.vi, "BUY"),
                ("non-VI ASK", self.non_vi, "SELL"), ("non-VI BID", self.non_vi, "BUY")]
        lines = [f"{'Performance':<24}" + "".join(f"{c[0]:>13}" for c in cols)]
        for label, attr in (("Average (bp)", "mean_bp"), ("Median (bp)", "median_bp"),
                            ("Standard Deviation (bp)", "std_bp")):
            row = f"{label:<24}"
            for _, summ, side in cols:
                s = summ.by_side.get(side) if summ else None
                row += f"{getattr(s, attr):>13.3f}" if s else f"{'n/a':>13}"
            lines.append(row)
        lines.append(f"days: VI={self.n_vi} non-VI={self.n_non_vi}")
        return "\n".join(lines)


def vi_stress(days: Sequence[TradingDay], plans: Sequence[ExecutionPlan],
              cfg: FillModelConfig = FillModelConfig()) -> VIStressReport:
    if not days or len(days) != len(plans):
        raise ValueError("need one plan per day and at least one day")
    return vi_partition([simulate_day(d, p, cfg) for d, p in zip(days, plans)])


def vi_partition(results: Sequence[SimResult]) -> VIStressReport:
    """Aggregate already simulated days separately for VI and non-VI sessions."""
    vi = [r for r in results if r.vi_day and not r.undefined_perf]
    rest = [r for r in results if not r.vi_day and not r.undefined_perf]
    return VIStressReport(aggregate_stats(vi) if vi else None, aggregate_stats(rest) if rest else None,
                          len(vi), len(rest))


def write_ledger(path: str | Path, results: Iterable[SimResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_HEADER)
        for r in sorted(results, key=lambda r: (r.symbol, r.date)):
            w.writerow([r.symbol, r.date.isoformat(), r.side.value, r.filled_qty,
                        repr(r.avg_price), repr(r.vwap), repr(r.perf_bp), int(r.vi_day)])


def read_ledger(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LEDGER_HEADER:
            raise ValueError(f"{path}: expected header {','.join(LEDGER_HEADER)}")
        rows = []
        for row in reader:
            rows.append({
                "symbol": row["symbol"], "date": dt.date.fromisoformat(row["date"]), "side": Side(row["side"]),
                "qty": int(row["qty"]), "avg_exec": float(row["avg_exec"]), "vwap": float(row["vwap"]),
                "perf_bp": float(row["perf_bp"]), "vi_flag": bool(int(row["vi_flag"])),
            })
    return rows
