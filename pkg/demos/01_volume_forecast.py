"""
Forecasting intraday volume ratios
==================================

A small walk through the forecasting half of the library: synthetic minute
bars, the log-ratio target, sliding windows, a briefly trained
encoder-decoder with a Student-t head, and its forecasts for one session.

Run with ``python3 demos/01_volume_forecast.py`` (about a minute on one core).
"""

import numpy as np

from volcast.features import build_windows, ratio_transform, split_by_day_fraction
from volcast.marketdata import SyntheticConfig, generate_synthetic
from volcast.model import ModelConfig, adjusted_predict, build_model, greedy_predict
from volcast.training import OptimConfig, evaluate, forecast_day, train

# %%
# Synthetic sessions of 60 one-minute bars. Volume follows a U-shaped
# intensity with multiplicative noise and occasional spikes.
days, metas = generate_synthetic(SyntheticConfig(n_stocks=3, n_days=20, bars_per_day=60, seed=1))
day = days[0]
print(f"{len(days)} sessions, first is {day.symbol} on {day.date} with {day.total_volume:,} shares")

# The target is ln(T * volume / day volume); a flat profile maps to zero.
y = ratio_transform(day).y
print("open / midday / close target:", np.round(y[[0, 30, 59]], 3))

# %%
# Windows hold one session of context and forecast the next three minutes.
windows = build_windows(days, metas, context_len=60, horizon=3)
split = split_by_day_fraction(windows, 0.7, 0.15)
print(f"windows: train {len(split.train)}, validation {len(split.validation)}, test {len(split.test)}")

# %%
# A deliberately tiny model and a short run, so the demo stays quick.
config = ModelConfig(d_model=16, n_heads=2, enc_layers=1, dec_layers=1, context=60, horizon=3,
                     n_stocks=len(metas), dropout=0.0)
model = build_model("IVE", config, seed=0)
report = train(model, split, OptimConfig(lr=1e-3, batch_size=16, max_steps=150, eval_every=50), seed=0)
print(f"steps {report.steps_run}, best validation NLL {min(report.val_loss):.3f} at step {report.best_step}")
print("test metrics:", {k: round(v, 4) for k, v in evaluate(model, split.test).items()})

# %%
# One-step-ahead distributions for a test session. The point forecast is the
# location; the adjusted forecast adds a fifth of the standard deviation.
test_day = days[-1]
minutes, params, target = forecast_day(model, windows, test_day.symbol, test_day.date)
greedy = greedy_predict(params)
shifted = adjusted_predict(params, c=0.2, gate=True)
print(f"{test_day.symbol} {test_day.date}: {len(minutes)} forecast minutes")
print(f"{'minute':>6} {'target':>8} {'greedy':>8} {'shifted':>8} {'std':>6}")
for i in (0, 15, 30, 45, len(minutes) - 1):
    print(f"{minutes[i]:>6} {target[i]:>8.3f} {greedy[i]:>8.3f} {shifted[i]:>8.3f} {params.std()[i]:>6.3f}")

# The implied volume fractions are exp(prediction) / T.
ratios = np.exp(greedy) / test_day.n_bars
print(f"implied fractions sum to {ratios.sum():.3f} before renormalisation")
