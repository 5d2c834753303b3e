"""Encoder-decoder transformer with a Student-t head, plus recurrent baselines.

Both model families consume the batches produced by
:meth:`volcast.features.WindowSet.batch`:

* ``context``      (B, C, F) normalised volume features and time encodings
* ``time_future``  (B, H, 8) time encodings of the steps being forecast
* ``stock_id``     (B,)      stock vocabulary index
* ``target``       (B, H)    log volume ratios
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np

from . import numcore as nc
from .features import N_FEATURES, TIME_DIMS
from .numcore import Tensor

DF_MARGIN = 1e-6
_MASK_VALUE = -1e9


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 4
    ffn_mult: int = 4
    context: int = 390
    horizon: int = 3
    n_stocks: int = 1
    dropout: float = 0.1
    df_floor: float = 2.0
    scale_floor: float = 1e-4
    n_features: int = N_FEATURES
    time_dims: int = TIME_DIMS

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.horizon < 1 or self.context < 1 or self.n_stocks < 1:
            raise ValueError("horizon, context and n_stocks must be >= 1")
        if self.df_floor <= 0 or self.scale_floor <= 0:
            raise ValueError("df_floor and scale_floor must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class StudentTParams:
    """Per-step Student-t parameters; fields are arrays or tensors of equal shape."""

    df: Union[np.ndarray, Tensor]
    loc: Union[np.ndarray, Tensor]
    scale: Union[np.ndarray, Tensor]

    def numpy(self) -> "StudentTParams":
        def arr(v):
            return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        return StudentTParams(arr(self.df), arr(self.loc), arr(self.scale))

    def std(self) -> np.ndarray:
        """Distribution standard deviation ``scale * sqrt(df / (df - 2))``."""
        p = self.numpy()
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(p.df > 2.0, p.scale * np.sqrt(p.df / (p.df - 2.0)), np.inf)


# -- shared pieces --------------------------------------------------------


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError(f"sinusoidal encoding needs an even width, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def _linear_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))


def student_t_nll(params: StudentTParams, target) -> Tensor:
    """Mean negative log density of ``target`` under the per-step Student-t."""
    df, loc, scale = nc.as_tensor(params.df), nc.as_tensor(params.loc), nc.as_tensor(params.scale)
    x = nc.as_tensor(target)
    z = (x - loc) / scale
    half = (df + 1.0) * 0.5
    nll = (
        nc.lgamma(df * 0.5) - nc.lgamma(half)
        + 0.5 * nc.log(df * math.pi)
        + nc.log(scale)
        + half * nc.log(1.0 + z * z / df)
    )
    return nc.mean(nc.reshape(nll, (-1,)))


def greedy_predict(params: StudentTParams) -> np.ndarray:
    return np.array(params.numpy().loc, copy=True)


def adjusted_predict(params: StudentTParams, c: float = 0.2, gate=True) -> np.ndarray:
    """Location shifted up by ``c`` distribution std-devs where ``gate`` holds."""
    p = params.numpy()
    return np.where(gate, p.loc + c * params.std(), p.loc)


class _Module:
    """Parameter bookkeeping shared by the forecaster and the baselines."""

    kind: str
    config: ModelConfig
    params: dict[str, Tensor]

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def cast(self, dtype) -> None:
        """Convert parameters in place (float32 for fast training, float64 otherwise)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ModelError("state dict keys do not match the model")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ModelError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def _linear(self, x, name: str) -> Tensor:
        return x @ self.params[name + ".w"] + self.params[name + ".b"]


# -- transformer ----------------------------------------------------------


class Forecaster(_Module):
    kind = "IVE"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        d, F = config.d_model, config.n_features
        self._dense("in_proj", rng, F, d)
        self._dense("time_proj", rng, config.time_dims, d)
        self._add("stock_emb", rng.normal(0.0, 0.1, (config.n_stocks, d)))
        for i in range(config.enc_layers):
            p = f"enc{i}"
            self._norm(p + ".ln1", d)
            self._attn(p + ".self", rng, d)
            self._norm(p + ".ln2", d)
            self._ffn(p + ".ffn", rng, d)
        self._norm("enc.ln", d)
        for i in range(config.dec_layers):
            p = f"dec{i}"
            self._norm(p + ".ln1", d)
            self._attn(p + ".self", rng, d)
            self._norm(p + ".ln2", d)
            self._attn(p + ".cross", rng, d)
            self._norm(p + ".ln3", d)
            self._ffn(p + ".ffn", rng, d)
        self._norm("dec.ln", d)
        self._add("head.w", rng.normal(0.0, 0.01, (d, 3)))
        self._add("head.b", np.zeros(3))
        self.pe_enc = positional_encoding(config.context, d)
        self.pe_dec = positional_encoding(config.horizon, d)
        causal = np.triu(np.ones((config.horizon, config.horizon)), k=1)
        self.causal_mask = causal * _MASK_VALUE

    def _dense(self, name, rng, fan_in, fan_out):
        self._add(name + ".w", _linear_init(rng, fan_in, fan_out))
        self._add(name + ".b", np.zeros(fan_out))

    def _norm(self, name, d):
        self._add(name + ".g", np.ones(d))
        self._add(name + ".b", np.zeros(d))

    def _attn(self, name, rng, d):
        for part in ("q", "k", "v", "o"):
            self._dense(f"{name}.{part}", rng, d, d)

    def _ffn(self, name, rng, d):
        self._dense(name + ".1", rng, d, d * self.config.ffn_mult)
        self._dense(name + ".2", rng, d * self.config.ffn_mult, d)

    def _ln(self, x, name):
        return nc.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _attention(self, x, memory, name, mask=None):
        h = self.config.n_heads
        B, Lq, d = x.shape
        Lk = memory.shape[1]
        dk = d // h
        q = nc.transpose(nc.reshape(self._linear(x, name + ".q"), (B, Lq, h, dk)), (0, 2, 1, 3))
        k = nc.transpose(nc.reshape(self._linear(memory, name + ".k"), (B, Lk, h, dk)), (0, 2, 1, 3))
        v = nc.transpose(nc.reshape(self._linear(memory, name + ".v"), (B, Lk, h, dk)), (0, 2, 1, 3))
        ctx = nc.attention(q, k, v, mask)
        merged = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))
        return self._linear(merged, name + ".o")

    def _ffn_apply(self, x, name):
        return self._linear(nc.relu(self._linear(x, name + ".1")), name + ".2")

    def forward_batch(self, batch: dict, rng: np.random.Generator | None = None) -> StudentTParams:
        """Student-t parameters of shape (B, H). ``rng`` enables dropout."""
        cfg = self.config
        ctx = batch["context"]
        B, C, F = ctx.shape
        if C != cfg.context or F != cfg.n_features or batch["time_future"].shape[1:] != (cfg.horizon, cfg.time_dims):
            raise ModelError(
                f"batch dims context={ctx.shape}, future={batch['time_future'].shape} do not match {cfg}"
            )
        rate = cfg.dropout if rng is not None else 0.0
        emb = nc.reshape(nc.embedding(self.params["stock_emb"], batch["stock_id"]), (B, 1, cfg.d_model))

        x = self._linear(Tensor(ctx), "in_proj") + self.pe_enc + nc.broadcast_to(emb, (B, C, cfg.d_model))
        x = nc.dropout(x, rate, rng)
        for i in range(cfg.enc_layers):
            p = f"enc{i}"
            a = self._ln(x, p + ".ln1")
            x = x + nc.dropout(self._attention(a, a, p + ".self"), rate, rng)
            x = x + nc.dropout(self._ffn_apply(self._ln(x, p + ".ln2"), p + ".ffn"), rate, rng)
        memory = self._ln(x, "enc.ln")

        H = cfg.horizon
        y = self._linear(Tensor(batch["time_future"]), "time_proj") + self.pe_dec + nc.broadcast_to(emb, (B, H, cfg.d_model))
        for i in range(cfg.dec_layers):
            p = f"dec{i}"
            q = self._ln(y, p + ".ln1")
            y = y + nc.dropout(self._attention(q, q, p + ".self", self.causal_mask), rate, rng)
            y = y + nc.dropout(self._attention(self._ln(y, p + ".ln2"), memory, p + ".cross"), rate, rng)
            y = y + nc.dropout(self._ffn_apply(self._ln(y, p + ".ln3"), p + ".ffn"), rate, rng)
        raw = self._linear(self._ln(y, "dec.ln"), "head")
        df = cfg.df_floor + nc.clip_min(nc.softplus(raw[..., 0]), DF_MARGIN)
        loc = raw[..., 1]
        scale = cfg.scale_floor + nc.softplus(raw[..., 2])
        if not (np.all(np.isfinite(df.data)) and np.all(np.isfinite(loc.data)) and np.all(np.isfinite(scale.data))):
            raise ModelError("non-finite forecast parameters (training diverged?)")
        return StudentTParams(df, loc, scale)

    def forward(self, window) -> StudentTParams:
        """Forecast for a single :class:`~volcast.features.FeatureWindow`."""
        batch = {
            "context": window.context[None],
            "time_future": window.time_enc_future[None],
            "stock_id": np.array([window.stock_id]),
        }
        p = self.forward_batch(batch).numpy()
        return StudentTParams(p.df[0], p.loc[0], p.scale[0])

    def loss(self, batch: dict, rng: np.random.Generator | None = None) -> Tensor:
        return student_t_nll(self.forward_batch(batch, rng), batch["target"])

    def predict_params(self, batch: dict) -> StudentTParams:
        return self.forward_batch(batch).numpy()

    def predict_point(self, batch: dict) -> np.ndarray:
        return greedy_predict(self.predict_params(batch))


# -- recurrent baselines --------------------------------------------------


class BaselineKind(str, Enum):
    RNN_HR = "RNN-HR"
    LSTM_HR = "LSTM-HR"
    BILSTM_HR = "BiLSTM-HR"


class RecurrentBaseline(_Module):
    """Recurrent encoder over the context; the final hidden state (both
    directions for BiLSTM) goes through a linear head to H point forecasts.
    Trained with squared error.
    """

    def __init__(self, kind: BaselineKind, config: ModelConfig, seed: int = 0):
        self.kind = BaselineKind(kind).value
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        hdim, F = config.d_model, config.n_features
        gates = hdim if self.kind == BaselineKind.RNN_HR.value else 4 * hdim
        directions = ("fw", "bw") if self.kind == BaselineKind.BILSTM_HR.value else ("fw",)
        self.directions = directions
        self._add("stock_emb", rng.normal(0.0, 0.1, (config.n_stocks, hdim)))
        for d in directions:
            self._add(f"{d}.wx", _linear_init(rng, F, gates))
            self._add(f"{d}.wh", rng.normal(0.0, 1.0 / math.sqrt(hdim), (hdim, gates)))
            self._add(f"{d}.we", _linear_init(rng, hdim, gates))
            bias = np.zeros(gates)
            if gates == 4 * hdim:
                bias[hdim : 2 * hdim] = 1.0  # forget gate
            self._add(f"{d}.b", bias)
        self._add("head.w", _linear_init(rng, hdim * len(directions), config.horizon) * 0.1)
        self._add("head.b", np.zeros(config.horizon))

    def _run(self, ctx: np.ndarray, static: Tensor, d: str, reverse: bool) -> Tensor:
        B, C, _ = ctx.shape
        hdim = self.config.d_model
        wx, wh = self.params[f"{d}.wx"], self.params[f"{d}.wh"]
        h = Tensor(np.zeros((B, hdim)))
        c = Tensor(np.zeros((B, hdim)))
        steps = range(C - 1, -1, -1) if reverse else range(C)
        lstm = self.kind != BaselineKind.RNN_HR.value
        for t in steps:
            pre = Tensor(ctx[:, t]) @ wx + h @ wh + static
            if not lstm:
                h = nc.tanh(pre)
                continue
            sig = nc.sigmoid(pre[:, : 3 * hdim])
            g = nc.tanh(pre[:, 3 * hdim :])
            i, f, o = sig[:, :hdim], sig[:, hdim : 2 * hdim], sig[:, 2 * hdim :]
            c = f * c + i * g
            h = o * nc.tanh(c)
        return h

    def forward_batch(self, batch: dict, rng: np.random.Generator | None = None) -> Tensor:
        ctx = batch["context"]
        if ctx.shape[1:] != (self.config.context, self.config.n_features):
            raise ModelError(f"context shape {ctx.shape} does not match {self.config}")
        emb = nc.embedding(self.params["stock_emb"], batch["stock_id"])
        finals = []
        for d in self.directions:
            static = emb @ self.params[f"{d}.we"] + self.params[f"{d}.b"]
            finals.append(self._run(ctx, static, d, reverse=(d == "bw")))
        h = finals[0] if len(finals) == 1 else nc.concat(finals, axis=-1)
        return self._linear(h, "head")

    def loss(self, batch: dict, rng: np.random.Generator | None = None) -> Tensor:
        err = self.forward_batch(batch, rng) - batch["target"]
        return nc.mean(nc.reshape(err * err, (-1,)))

    def predict_point(self, batch: dict) -> np.ndarray:
        return self.forward_batch(batch).data.copy()


def baseline_forward(window, model: RecurrentBaseline) -> np.ndarray:
    batch = {"context": window.context[None], "stock_id": np.array([window.stock_id])}
    return model.forward_batch(batch).data[0]


def build_model(kind: str, config: ModelConfig, seed: int = 0) -> _Module:
    if kind == Forecaster.kind:
        return Forecaster(config, seed)
    return RecurrentBaseline(BaselineKind(kind), config, seed)


# -- checkpoints ----------------------------------------------------------

_MAGIC = b"VOLCKPT\x00"
_VERSION = 1


def save_checkpoint(path: str | Path, model: _Module) -> None:
    """Binary container: magic, version, JSON header, little-endian float64 blobs."""
    names = list(model.params)
    header = {
        "kind": model.kind,
        "config": asdict(model.config),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> _Module:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ModelError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(n).decode("utf-8"))
        model = build_model(header["kind"], ModelConfig(**header["config"]))
        state = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ModelError(f"{path}: truncated tensor {spec['name']}")
            state[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    model.load_state_dict(state)
    return model
