"""
Scheduling and simulating a VWAP order
======================================

From predicted volume fractions to a per-minute schedule, through the bar
fill model, to performance against the session VWAP. Predictions here come
from the generator's own U-shaped intensity so the demo needs no training.

Run with ``python3 demos/02_vwap_backtest.py``.
"""

import numpy as np

from volcast.execsim import (
    ExecutionPlan, FillModelConfig, OrderKind, Side, aggregate_stats, allocate_quantity, simulate_day, vi_partition,
)
from volcast.marketdata import SyntheticConfig, generate_synthetic, iter_by_symbol, u_shape_profile

# %%
# Largest-remainder apportionment keeps the schedule integral and exact.
print(allocate_quantity([1 / 3, 1 / 3, 1 / 3], 10))

cfg = SyntheticConfig(n_stocks=8, n_days=15, price_vol=0.003, seed=4)
days, metas = generate_synthetic(cfg)
profile = u_shape_profile(cfg.bars_per_day, cfg.u_shape_depth)

# %%
# One order in detail: buy 1% of the previous session's volume.
by_symbol = dict(iter_by_symbol(days))
prev, day = by_symbol["S000"][:2]
qty = round(0.01 * prev.total_volume)
plan = ExecutionPlan(day.symbol, day.date, Side.BUY, qty, allocate_quantity(profile, qty))
fill_cfg = FillModelConfig()
result = simulate_day(day, plan, fill_cfg)

limit = sum(f.qty for f in result.fills if f.kind is OrderKind.LIMIT)
market = sum(f.qty for f in result.fills if f.kind is OrderKind.MARKET)
print(f"{day.symbol} {day.date}: {qty} shares, {limit} on limit orders and {market} swept")
print(f"average {result.avg_price:.4f} against VWAP {result.vwap:.4f}: {result.perf_bp:+.2f} bp")

# %%
# A small backtest: every stock, every session after the first, random side.
rng = np.random.default_rng(0)
results = []
for symbol, sdays in iter_by_symbol(days):
    for prev, day in zip(sdays[:-1], sdays[1:]):
        side = Side.BUY if rng.random() < 0.5 else Side.SELL
        qty = max(1, round(0.01 * prev.total_volume))
        results.append(simulate_day(day, ExecutionPlan(symbol, day.date, side, qty,
                                                       allocate_quantity(profile, qty)), fill_cfg))

print()
print(aggregate_stats(results).table())

# %%
# The same results split by the volatility-interruption flag.
print()
print(vi_partition(results).table())
