import datetime as dt

import numpy as np
import pytest

from volcast.marketdata import TradingDay

DATE = dt.date(2024, 3, 4)  # a Monday


def make_day(close, volume, symbol="AAA", date=DATE, wick=0.0, open_=None):
    """Day whose bars open at the previous close and carry symmetric wicks."""
    close = np.asarray(close, dtype=np.float64)
    volume = np.asarray(volume, dtype=np.int64)
    if open_ is None:
        open_ = np.concatenate([[close[0]], close[:-1]])
    open_ = np.asarray(open_, dtype=np.float64)
    high = np.maximum(open_, close) + wick
    low = np.minimum(open_, close) - wick
    amount = volume * (high + low + close) / 3.0
    return TradingDay(symbol, date, open_, high, low, close, volume, amount)


def random_day(rng, T=390, symbol="AAA", date=DATE):
    close = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.002, T)))
    open_ = np.concatenate([[100.0], close[:-1]])
    high = np.maximum(open_, close) * np.exp(np.abs(rng.normal(0, 0.001, T)))
    low = np.minimum(open_, close) * np.exp(-np.abs(rng.normal(0, 0.001, T)))
    volume = rng.integers(0, 5000, T)
    volume[rng.integers(T)] += 1
    amount = volume * (high + low + close) / 3.0
    return TradingDay(symbol, date, open_, high, low, close, volume, amount)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- CLI pipeline shared by the CLI tests and the reproducibility criterion --

TINY_CONFIG = {
    "seed": 3,
    "data": {"synthetic": {"n_stocks": 4, "n_days": 16, "bars_per_day": 60, "price_vol": 0.003}},
    "model": {"d_model": 8, "n_heads": 2, "enc_layers": 1, "dec_layers": 1, "context": 60, "horizon": 2,
              "dropout": 0.0},
    "optim": {"max_steps": 20, "batch_size": 8, "eval_every": 10},
    "fill": {"first_sweep_offset": 10, "final_sweep_offset": 3},
    "split": {"train_frac": 0.6, "val_frac": 0.2},
    "eval": {"checkpoints": "run"},
    "backtest": {"checkpoint": "run/IVE.ckpt", "split": "train", "stocks_per_day": 4},
    "spike": {"checkpoint": "run/IVE.ckpt", "split": "train"},
    "perf_regression": {"ledger": "bt/ledger.csv"},
}

PIPELINE = [("synth", "syn"), ("train", "run"), ("eval", "ev"), ("backtest", "bt"),
            ("spike-analysis", "sp"), ("perf-regression", "pr")]


def run_pipeline(root, config=None, seed=None):
    """Run every subcommand in order inside ``root``; returns the exit codes.

    Relative paths in the config resolve against ``root``.
    """
    import json
    import os

    from volcast.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(config or TINY_CONFIG))
    codes = {}
    cwd = os.getcwd()
    os.chdir(root)
    try:
        for cmd, out in PIPELINE:
            argv = [cmd, "--config", str(cfg_path), "--out", out, "--threads", "1"]
            if seed is not None:
                argv += ["--seed", str(seed)]
            codes[cmd] = main(argv)
    finally:
        os.chdir(cwd)
    return codes


def tree_bytes(root):
    """Relative path -> file bytes for every output under ``root``."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- acceptance report ----------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores one acceptance verdict for the summary."""
    def _record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
