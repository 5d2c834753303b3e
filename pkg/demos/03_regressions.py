"""
Regressions behind the analyses
===============================

Ordinary least squares with classical inference, applied to the two uses in
the library: how a model's predicted spread tracks the realised volume
ratio, and which session conditions explain execution performance.

Run with ``python3 demos/03_regressions.py``.
"""

import numpy as np

from volcast.analysis import (
    compute_market_features, increase_history, ols, performance_regression, spike_diff_regression, spike_gate,
    spike_level_regression,
)
from volcast.execsim import ExecutionPlan, Side, allocate_quantity, simulate_day
from volcast.marketdata import SyntheticConfig, generate_synthetic, iter_by_symbol, u_shape_profile

rng = np.random.default_rng(3)

# %%
# Plain OLS on a planted linear model.
X = rng.normal(size=(200, 2))
y = 1.5 + X @ [2.0, -0.5] + rng.normal(0, 0.3, 200)
print(ols(X, y, names=["a", "b"]).table())

# %%
# A stand-in for model output: a predicted std that partly follows the
# realised volume ratio. The level regression sees the link directly.
ratio = np.exp(rng.normal(0, 0.5, 1000))
pred_std = 0.3 + 0.1 * ratio + rng.normal(0, 0.05, 1000)
print()
print("level:", spike_level_regression(pred_std, ratio).table().splitlines()[-1])
print("diff: ", spike_diff_regression(pred_std, ratio).table().splitlines()[-1])

# The gate fires where the std rises by more than its typical rise.
history = increase_history(pred_std[:500], ratio[:500])
gate = spike_gate(pred_std[500:], history)
print(f"gate open on {gate.mean():.0%} of the later minutes")

# %%
# Execution performance explained by session conditions.
cfg = SyntheticConfig(n_stocks=10, n_days=8, price_vol=0.004, seed=5)
days, metas = generate_synthetic(cfg)
profile = u_shape_profile(cfg.bars_per_day, cfg.u_shape_depth)
features, perf = [], []
for symbol, sdays in iter_by_symbol(days):
    for prev, day in zip(sdays[:-1], sdays[1:]):
        qty = max(1, round(0.01 * prev.total_volume))
        side = Side.BUY if rng.random() < 0.5 else Side.SELL
        r = simulate_day(day, ExecutionPlan(symbol, day.date, side, qty, allocate_quantity(profile, qty)))
        features.append(compute_market_features(day, metas[symbol]))
        perf.append(r.perf_bp)
print()
print(performance_regression(features, perf).table())
