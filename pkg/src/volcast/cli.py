"""Command-line entry point: ``volcast <command> --config run.json --out DIR``.

Each command reads one JSON config, fills in every default, writes the
resolved config next to its outputs, and produces byte-identical files for
identical inputs at ``--threads 1``. On failure it prints one diagnostic line,
removes whatever it had written, and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import analysis, execsim, features, marketdata, model, training

logger = logging.getLogger("volcast")

MODEL_KINDS = ("RNN-HR", "LSTM-HR", "BiLSTM-HR", "IVE")
COMMANDS = ("synth", "train", "eval", "backtest", "spike-analysis", "perf-regression")


class CLIError(RuntimeError):
    pass


# -- configuration --------------------------------------------------------

_DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {"dir": None, "bars": None, "meta": None, "bars_per_day": marketdata.BARS_PER_DAY, "synthetic": None},
    "split": {"train_end": None, "val_end": None, "train_frac": 0.7, "val_frac": 0.15},
    "train": {"models": list(MODEL_KINDS), "test_max_windows": None},
    "eval": {"checkpoints": None, "split": "test", "max_windows": None},
    "backtest": {"checkpoint": None, "split": "test", "stocks_per_day": 5, "qty_fraction": 0.01,
                 "gate": True, "c": 0.2},
    "spike": {"checkpoint": None, "split": "test", "max_days": None, "units": "log"},
    "perf_regression": {"ledger": None},
}
_DATACLASS_SECTIONS = {
    "model": model.ModelConfig,
    "optim": training.OptimConfig,
    "fill": execsim.FillModelConfig,
}


def _jsonable(v):
    if isinstance(v, dt.date):
        return v.isoformat()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _merge(section: str, defaults: dict, given: dict) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise CLIError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return {**defaults, **given}


def _build(cls, section: str, given: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(given) - names
    if unknown:
        raise CLIError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    values = dict(given)
    for f in dataclasses.fields(cls):
        if f.name in values and "date" in str(f.type) and isinstance(values[f.name], str):
            values[f.name] = dt.date.fromisoformat(values[f.name])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"[{section}] {exc}") from exc


def resolve_config(raw: dict, seed: int | None = None) -> dict:
    """Fill every section with defaults; ``seed`` (from the command line) wins over the file."""
    if not isinstance(raw, dict):
        raise CLIError("config must be a JSON object")
    known = set(_DEFAULTS) | set(_DATACLASS_SECTIONS) | {"seed"}
    unknown = set(raw) - known
    if unknown:
        raise CLIError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    cfg: dict[str, Any] = {"seed": int(raw.get("seed", 0) if seed is None else seed)}
    for name, defaults in _DEFAULTS.items():
        cfg[name] = _merge(name, defaults, raw.get(name) or {})
    syn = cfg["data"]["synthetic"]
    if syn is not None:
        # the generator follows the run seed unless the file pins its own
        syn = {"seed": cfg["seed"], **syn} if seed is None else {**syn, "seed": cfg["seed"]}
        cfg["data"]["synthetic"] = dataclasses.asdict(_build(marketdata.SyntheticConfig, "data.synthetic", syn))
    for name, cls in _DATACLASS_SECTIONS.items():
        cfg[name] = dataclasses.asdict(_build(cls, name, raw.get(name) or {}))
    for key in ("train_end", "val_end"):
        if cfg["split"][key] is not None:
            cfg["split"][key] = dt.date.fromisoformat(str(cfg["split"][key]))
    if cfg["spike"]["units"] not in ("log", "raw"):
        raise CLIError("[spike] units must be 'log' or 'raw'")
    bad = set(cfg["train"]["models"]) - set(MODEL_KINDS)
    if bad:
        raise CLIError(f"unknown model kind(s): {', '.join(sorted(bad))}")
    return _jsonable(cfg)


# -- output bookkeeping ---------------------------------------------------


class Outputs:
    """Tracks written files so a failed run can remove its partial outputs."""

    def __init__(self, root: Path):
        self.root = root
        self.created_root = not root.exists()
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        self.written.append(p)
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content, encoding="utf-8")
        return p

    def validate(self) -> None:
        for p in self.written:
            if not p.is_file() or p.stat().st_size == 0:
                raise CLIError(f"output {p.name} was not written")
            if p.suffix == ".json":
                json.loads(p.read_text(encoding="utf-8"))

    def rollback(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
        if self.created_root and self.root.exists() and not any(self.root.iterdir()):
            self.root.rmdir()


# -- shared pipeline pieces -----------------------------------------------


def _load_data(cfg: dict):
    d = cfg["data"]
    if d["synthetic"] is not None:
        return marketdata.generate_synthetic(_build(marketdata.SyntheticConfig, "data.synthetic", d["synthetic"]))
    bars, meta = d["bars"], d["meta"]
    if d["dir"] is not None:
        bars = bars or str(Path(d["dir"]) / "bars.csv")
        meta = meta or str(Path(d["dir"]) / "meta.csv")
    if bars is None or meta is None:
        raise CLIError("config [data] needs 'synthetic', 'dir', or both 'bars' and 'meta'")
    for p in (bars, meta):
        if not Path(p).is_file():
            raise CLIError(f"missing input file: {p}")
    metas = marketdata.read_meta(meta)
    result = marketdata.load_minute_bars(bars, metas, bars_per_day=d["bars_per_day"])
    if result.warnings:
        logger.warning("%s: %d rejected day(s), %d missing weekday(s), %d filled minute(s)",
                       bars, len(result.rejected), result.missing_days, result.filled_minutes)
    if not result.days:
        raise CLIError(f"{bars}: no usable trading days")
    return result.days, metas


def _model_config(cfg: dict, n_stocks: int) -> model.ModelConfig:
    mc = _build(model.ModelConfig, "model", cfg["model"])
    if mc.n_stocks < n_stocks:
        mc = dataclasses.replace(mc, n_stocks=n_stocks)
    return mc


def _windows(cfg: dict, days, metas, mc: model.ModelConfig) -> features.WindowSet:
    return features.build_windows(days, metas, context_len=mc.context, horizon=mc.horizon)


def _cutoffs(cfg: dict, windows: features.WindowSet) -> tuple[dt.date, dt.date]:
    s = cfg["split"]
    if s["train_end"] is not None and s["val_end"] is not None:
        return dt.date.fromisoformat(s["train_end"]), dt.date.fromisoformat(s["val_end"])
    return features.day_fraction_cutoffs(windows, s["train_frac"], s["val_frac"])


def _split(cfg: dict, windows) -> features.DatasetSplit:
    return features.split_by_date(windows, *_cutoffs(cfg, windows))


def _partition(split: features.DatasetSplit, name: str) -> features.WindowSet:
    if name not in ("train", "validation", "test"):
        raise CLIError(f"unknown split {name!r}")
    return getattr(split, name)


def _dates_in(cfg: dict, windows, name: str, all_dates) -> list[dt.date]:
    tr, va = _cutoffs(cfg, windows)
    keep = {"train": lambda d: d <= tr, "validation": lambda d: tr < d <= va, "test": lambda d: d > va}
    if name not in keep:
        raise CLIError(f"unknown split {name!r}")
    return sorted(d for d in set(all_dates) if keep[name](d))


def _checkpoint(path, expect_kind: str | None = None) -> model._Module:
    if path is None or not Path(path).is_file():
        raise CLIError(f"missing checkpoint: {path}")
    m = model.load_checkpoint(path)
    if expect_kind is not None and m.kind != expect_kind:
        raise CLIError(f"{path}: expected a {expect_kind} checkpoint, found {m.kind}")
    return m


def _ckpt_name(kind: str) -> str:
    return f"{kind}.ckpt"


class _DayForecasts:
    """Cache of one-step forecasts per (symbol, date)."""

    def __init__(self, net, windows, dtype):
        self.net, self.windows, self.dtype = net, windows, dtype
        self.cache: dict = {}

    def get(self, symbol, date):
        key = (symbol, date)
        if key not in self.cache:
            try:
                self.cache[key] = training.forecast_day(self.net, self.windows, symbol, date, dtype=self.dtype)
            except KeyError:
                self.cache[key] = None
        return self.cache[key]


# -- commands -------------------------------------------------------------


def cmd_synth(cfg: dict, out: Outputs) -> None:
    if cfg["data"]["synthetic"] is None:
        cfg["data"]["synthetic"] = dataclasses.asdict(marketdata.SyntheticConfig(seed=cfg["seed"]))
        cfg["data"]["synthetic"]["start_date"] = cfg["data"]["synthetic"]["start_date"].isoformat()
    days, metas = _load_data(cfg)
    marketdata.write_minute_bars(out.path("bars.csv"), days)
    marketdata.write_meta(out.path("meta.csv"), metas.values())


def cmd_train(cfg: dict, out: Outputs) -> None:
    days, metas = _load_data(cfg)
    mc = _model_config(cfg, len(metas))
    cfg["model"] = dataclasses.asdict(mc)
    split = _split(cfg, _windows(cfg, days, metas, mc))
    optim = _build(training.OptimConfig, "optim", cfg["optim"])
    reports = []
    for kind in cfg["train"]["models"]:
        net = model.build_model(kind, mc, cfg["seed"])
        rep = training.train(net, split, optim, seed=cfg["seed"], test_max_windows=cfg["train"]["test_max_windows"])
        logger.info("%s: %d steps in %.1fs, test MAE %s", kind, rep.steps_run, rep.wall_clock_s, rep.test_mae)
        model.save_checkpoint(out.path(_ckpt_name(kind)), net)
        reports.append(rep.to_dict(include_timing=False))
    out.text("train_report.json", _dump({"reports": reports}))


def cmd_eval(cfg: dict, out: Outputs) -> None:
    e = cfg["eval"]
    ckdir = Path(e["checkpoints"] or out.root)
    nets = {k: _checkpoint(ckdir / _ckpt_name(k), k) for k in MODEL_KINDS}
    days, metas = _load_data(cfg)
    mc = nets["IVE"].config
    if mc.n_stocks < len(metas):
        raise CLIError(f"checkpoints know {mc.n_stocks} stocks but the data has {len(metas)}")
    windows = _partition(_split(cfg, _windows(cfg, days, metas, mc)), e["split"])
    if len(windows) == 0:
        raise CLIError(f"the {e['split']} split is empty")
    dtype = np.dtype(cfg["optim"]["dtype"])
    rows = {k: training.evaluate(nets[k], windows, max_windows=e["max_windows"], dtype=dtype) for k in MODEL_KINDS}
    lines = [f"{'Model':<12}{'RMSE':>10}{'MAE':>10}"]
    lines += [f"{k:<12}{rows[k]['rmse']:>10.4f}{rows[k]['mae']:>10.4f}" for k in MODEL_KINDS]
    out.text("eval.txt", "\n".join(lines) + "\n")
    out.text("eval.json", _dump({"split": e["split"], "n_windows": len(windows), "rows": rows}))


def _plan_day(cfg, day, prev_day, fc: _DayForecasts, rng) -> execsim.ExecutionPlan | None:
    b = cfg["backtest"]
    got = fc.get(day.symbol, day.date)
    T = day.n_bars
    if got is None or len(got[0]) != T:
        return None
    _, params, _ = got
    gate = False
    if b["gate"]:
        prev = fc.get(prev_day.symbol, prev_day.date)
        if prev is not None and len(prev[0]) > 2:
            ratio_prev = prev_day.volume[prev[0]] / prev_day.total_volume
            hist = analysis.increase_history(prev[1].std(), ratio_prev)
            if hist.size:
                gate = analysis.spike_gate(params.std(), hist)
    pred = model.adjusted_predict(params, c=b["c"], gate=gate) if b["gate"] else model.greedy_predict(params)
    qty = max(1, int(round(b["qty_fraction"] * prev_day.total_volume)))
    side = execsim.Side.BUY if rng.random() < 0.5 else execsim.Side.SELL
    return execsim.ExecutionPlan(day.symbol, day.date, side, qty, execsim.allocate_quantity(np.exp(pred) / T, qty))


def cmd_backtest(cfg: dict, out: Outputs) -> None:
    b = cfg["backtest"]
    net = _checkpoint(b["checkpoint"], "IVE")
    days, metas = _load_data(cfg)
    windows = _windows(cfg, days, metas, net.config)
    fillcfg = _build(execsim.FillModelConfig, "fill", cfg["fill"])
    by_symbol = {s: ds for s, ds in marketdata.iter_by_symbol(days)}
    dates = _dates_in(cfg, windows, b["split"], [d.date for d in days])
    fc = _DayForecasts(net, windows, np.dtype(cfg["optim"]["dtype"]))
    rng = np.random.default_rng(cfg["seed"])
    results, skipped = [], 0
    for date in dates:
        eligible = []
        for s in sorted(by_symbol):
            idx = [i for i, d in enumerate(by_symbol[s]) if d.date == date]
            if idx and idx[0] > 0:
                eligible.append((by_symbol[s][idx[0]], by_symbol[s][idx[0] - 1]))
        if not eligible:
            continue
        k = min(b["stocks_per_day"], len(eligible))
        for j in sorted(rng.choice(len(eligible), size=k, replace=False)):
            day, prev = eligible[j]
            plan = _plan_day(cfg, day, prev, fc, rng)
            if plan is None:
                skipped += 1
                continue
            results.append(execsim.simulate_day(day, plan, fillcfg))
    if not results:
        raise CLIError("no stock-day in the selected split could be backtested")
    summary = execsim.aggregate_stats(results)
    vi = execsim.vi_partition(results)
    execsim.write_ledger(out.path("ledger.csv"), results)
    out.text("summary.txt", summary.table() + "\n\n" + vi.table() + "\n")
    out.text("summary.json", _dump({"summary": summary.to_dict(), "vi_stress": vi.to_dict(),
                                    "n_results": len(results), "skipped_days": skipped}))


def cmd_spike(cfg: dict, out: Outputs) -> None:
    sp = cfg["spike"]
    net = _checkpoint(sp["checkpoint"], "IVE")
    days, metas = _load_data(cfg)
    windows = _windows(cfg, days, metas, net.config)
    dates = set(_dates_in(cfg, windows, sp["split"], [d.date for d in days]))
    fc = _DayForecasts(net, windows, np.dtype(cfg["optim"]["dtype"]))
    std, ratio, group = [], [], []
    for g, (symbol, sdays) in enumerate(marketdata.iter_by_symbol(days)):
        chosen = [d for d in sdays if d.date in dates]
        if sp["max_days"] is not None:
            chosen = chosen[: sp["max_days"]]
        for d in chosen:
            got = fc.get(symbol, d.date)
            if got is None or len(got[0]) == 0:
                continue
            minutes, params, target = got
            std.append(params.std())
            # log units are the model's own target, ln(T * ratio)
            ratio.append(target if sp["units"] == "log" else d.volume[minutes] / d.total_volume)
            group.append(np.full(len(minutes), len(group)))
    if not std:
        raise CLIError("no forecastable sessions in the selected split")
    s, r, g = np.concatenate(std), np.concatenate(ratio), np.concatenate(group)
    level = analysis.spike_level_regression(s, r)
    diff = analysis.spike_diff_regression(s, r, groups=g)
    out.text("spike_analysis.txt", "Level regression (volume ratio on predicted std)\n" + level.table()
             + "\n\nDifference regression (increases in volume ratio)\n" + diff.table() + "\n")
    out.text("spike_analysis.json", _dump({"units": sp["units"], "level": level.to_dict(), "diff": diff.to_dict(),
                                           "n": int(len(s))}))


def cmd_perf_regression(cfg: dict, out: Outputs) -> None:
    ledger = cfg["perf_regression"]["ledger"]
    if ledger is None or not Path(ledger).is_file():
        raise CLIError(f"missing ledger: {ledger}")
    rows = execsim.read_ledger(ledger)
    days, metas = _load_data(cfg)
    lookup = {(d.symbol, d.date): d for d in days}
    feats, perf = [], []
    for row in rows:
        day = lookup.get((row["symbol"], row["date"]))
        if day is None:
            raise CLIError(f"ledger row {row['symbol']} {row['date']} has no matching session")
        if math.isnan(row["perf_bp"]):
            continue
        feats.append(analysis.compute_market_features(day, metas[row["symbol"]]))
        perf.append(row["perf_bp"])
    res = analysis.performance_regression(feats, perf)
    out.text("perf_regression.txt", res.table() + "\n")
    out.text("perf_regression.json", _dump(res.to_dict()))


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "backtest": cmd_backtest,
    "spike-analysis": cmd_spike,
    "perf-regression": cmd_perf_regression,
}


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volcast", description="Intraday volume-ratio forecasting and VWAP backtests.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-reproducible)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(args: argparse.Namespace) -> None:
    raw = {}
    if args.config is not None:
        if not args.config.is_file():
            raise CLIError(f"missing config file: {args.config}")
        try:
            raw = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CLIError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    cfg = resolve_config(raw, args.seed)
    out = Outputs(args.out)
    try:
        _HANDLERS[args.command](cfg, out)
        out.text("config.json", _dump(cfg))
        out.validate()
    except BaseException:
        out.rollback()
        raise


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print(f"volcast {args.command}: error: --threads must be >= 1", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            run(args)
    except KeyboardInterrupt:
        print(f"volcast {args.command}: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one line, no traceback
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"volcast {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
