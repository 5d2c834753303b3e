"""AdamW, the mini-batch training loop, and point-forecast metrics."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import numcore as nc
from .features import DatasetSplit, WindowSet
from .model import Forecaster, StudentTParams, student_t_nll

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: int = 2000
    batch_size: int = 16
    grad_clip: float = 1.0
    patience: int = 10
    eval_every: int = 100
    eval_windows: int = 256
    dtype: str = "float32"
    lr_schedule: str = "constant"
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.max_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("max_steps, batch_size and eval_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``; cosine decays to ``min_lr_ratio * lr``."""
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(max(step - 1, 0) / max(self.max_steps - 1, 1), 1.0)
        return self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, cfg: OptimConfig, lr: float | None = None):
    """One decoupled-weight-decay Adam update, applied in place.

    ``params`` and ``grads`` map names to arrays; entries without a gradient
    are left untouched. Returns ``(params, state)``.
    """
    lr = cfg.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        if g is None:
            continue
        theta = params[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * theta
        theta -= lr * update
    return params, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


def point_metrics(pred, target) -> dict[str, float]:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if err.size == 0:
        raise ValueError("metrics of an empty set")
    return {"rmse": float(np.sqrt(np.mean(err * err))), "mae": float(np.mean(np.abs(err)))}


def _positions(n: int, limit: int | None) -> np.ndarray:
    if limit is None or n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(np.int64))


def _eval_copy(model, dtype):
    if dtype is None or np.dtype(dtype) == next(iter(model.params.values())).data.dtype:
        return model, next(iter(model.params.values())).data.dtype
    clone = copy.deepcopy(model)
    clone.cast(dtype)
    return clone, np.dtype(dtype)


def predict_windows(model, windows: WindowSet, batch_size: int = 256, max_windows: int | None = None,
                    dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Point forecasts and targets, both (n, H), over (a stride of) ``windows``."""
    model, dt = _eval_copy(model, dtype)
    pos = _positions(len(windows), max_windows)
    preds, targets = [], []
    with nc.precision(dt):
        for i in range(0, len(pos), batch_size):
            batch = windows.batch(pos[i : i + batch_size])
            preds.append(np.asarray(model.predict_point(batch), dtype=np.float64))
            targets.append(batch["target"])
    return np.concatenate(preds), np.concatenate(targets)


def forecast_day(model: Forecaster, windows: WindowSet, symbol: str, date, batch_size: int = 256,
                 dtype=None) -> tuple[np.ndarray, StudentTParams, np.ndarray]:
    """One-step-ahead distributions for every forecastable minute of a session.

    Returns ``(minutes, params, targets)`` with ``params`` fields of shape (n,).
    """
    if not isinstance(model, Forecaster):
        raise TypeError("forecast_day needs a distributional forecaster")
    model, dt = _eval_copy(model, dtype)
    pos, minutes = windows.day_positions(symbol, date)
    df, loc, scale, tgt = [], [], [], []
    with nc.precision(dt):
        for i in range(0, len(pos), batch_size):
            batch = windows.batch(pos[i : i + batch_size])
            p = model.predict_params(batch)
            df.append(p.df[:, 0])
            loc.append(p.loc[:, 0])
            scale.append(p.scale[:, 0])
            tgt.append(batch["target"][:, 0])
    cat = lambda xs: np.concatenate(xs).astype(np.float64) if xs else np.zeros(0)
    return minutes, StudentTParams(cat(df), cat(loc), cat(scale)), cat(tgt)


def evaluate(model, windows: WindowSet, batch_size: int = 256, max_windows: int | None = None,
             dtype=None) -> dict[str, float]:
    """RMSE and MAE of one-step-ahead point forecasts in log-ratio units."""
    if len(windows) == 0:
        raise ValueError("cannot evaluate on an empty window set")
    pred, target = predict_windows(model, windows, batch_size, max_windows, dtype)
    return point_metrics(pred[:, 0], target[:, 0])


def mean_loss(model, windows: WindowSet, positions, batch_size: int = 256) -> float:
    """Model objective (NLL for the forecaster, MSE for baselines) averaged over windows."""
    total, count = 0.0, 0
    for i in range(0, len(positions), batch_size):
        batch = windows.batch(positions[i : i + batch_size])
        n = len(batch["target"])
        total += model.loss(batch).item() * n
        count += n
    return total / count


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; each epoch is a fresh permutation."""
    pending = np.empty(0, dtype=np.int64)
    while True:
        while len(pending) < batch_size:
            pending = np.concatenate([pending, rng.permutation(n)])
        yield pending[:batch_size]
        pending = pending[batch_size:]


@dataclass
class TrainReport:
    model: str
    loss_name: str
    seed: int
    steps_run: int
    best_step: int
    train_loss: list[float]
    val_steps: list[int]
    val_loss: list[float]
    test_rmse: float | None = None
    test_mae: float | None = None
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        out = asdict(self)
        if not include_timing:
            out.pop("wall_clock_s")
        return out


def train(model, split: DatasetSplit, optim: OptimConfig = OptimConfig(), seed: int = 0,
          test_max_windows: int | None = None) -> TrainReport:
    """Mini-batch training with clipping, early stopping on validation loss,
    and restoration of the best-validation parameters.

    Deterministic for a given seed in single-threaded mode. Parameters end
    in float64 whatever the training precision.
    """
    if len(split.train) == 0:
        raise ValueError("training set is empty")
    started = time.perf_counter()
    dtype = np.dtype(optim.dtype)
    model.cast(dtype)
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng([seed, 1])
    val_pos = _positions(len(split.validation), optim.eval_windows)
    state = AdamWState()
    train_loss: list[float] = []
    val_steps: list[int] = []
    val_loss: list[float] = []
    best, best_step, best_state, bad = np.inf, 0, None, 0
    loss_name = "student_t_nll" if isinstance(model, Forecaster) else "mse"

    sampler = _epoch_batches(len(split.train), optim.batch_size, rng)
    with nc.precision(dtype):
        for step in range(1, optim.max_steps + 1):
            batch = split.train.batch(next(sampler))
            model.zero_grad()
            with nc.Tape() as tape:
                loss = model.loss(batch, drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"{model.kind}: non-finite loss {value} at step {step}")
            tape.backward(loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            clip_global_norm(grads, optim.grad_clip)
            adamw_step({k: p.data for k, p in model.params.items()}, grads, state, optim, optim.lr_at(step))
            train_loss.append(value)

            if len(val_pos) and (step % optim.eval_every == 0 or step == optim.max_steps):
                vl = mean_loss(model, split.validation, val_pos)
                val_steps.append(step)
                val_loss.append(vl)
                if vl < best:
                    best, best_step, best_state, bad = vl, step, model.state_dict(), 0
                else:
                    bad += 1
                    if bad >= optim.patience:
                        logger.info("%s: early stop at step %d (best %d)", model.kind, step, best_step)
                        break

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_step = len(train_loss)
    model.cast(np.float64)
    report = TrainReport(
        model=model.kind, loss_name=loss_name, seed=seed, steps_run=len(train_loss), best_step=best_step,
        train_loss=train_loss, val_steps=val_steps, val_loss=val_loss,
    )
    if len(split.test):
        m = evaluate(model, split.test, max_windows=test_max_windows, dtype=dtype)
        report.test_rmse, report.test_mae = m["rmse"], m["mae"]
    report.wall_clock_s = time.perf_counter() - started
    return report


def constant_nll(train_targets, eval_targets) -> float:
    """NLL on ``eval_targets`` of one Student-t fitted by maximum likelihood to ``train_targets``."""
    df, loc, scale = stats.t.fit(np.asarray(train_targets, dtype=np.float64).ravel())
    x = np.asarray(eval_targets, dtype=np.float64).ravel()
    p = StudentTParams(np.full_like(x, df), np.full_like(x, loc), np.full_like(x, scale))
    return student_t_nll(p, x).item()
