"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the forecaster and the recurrent baselines need is here. Operations
record themselves on the active :class:`Tape` when at least one input is
tracked; outside a tape every op is a plain numpy evaluation, which is what
finite-difference checks and inference use.

Broadcasting is restricted to leading dimensions: the smaller operand's shape
must be a suffix of the larger one's (a bias of shape ``(d,)`` against
``(B, C, d)``, a mask ``(C, C)`` against ``(B, h, C, C)``, or a scalar).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

LAYER_NORM_EPS = 1e-5

_local = threading.local()
_dtype = np.dtype(np.float64)


def default_dtype() -> np.dtype:
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily create tensors in ``dtype`` (float64 or float32)."""
    global _dtype
    previous, _dtype = _dtype, np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = previous


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Ordered record of the primitive ops evaluated inside a ``with`` block.

    ``backward`` replays the record in reverse and deposits gradients on the
    tracked leaf tensors. A tape can be replayed once; run the forward pass
    again under a fresh tape for another gradient.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that was already replayed")
        for p in parents:
            if p._leaf and p.requires_grad:
                self._leaves[id(p)] = p
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; run the forward pass again")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tracked tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.consumed = True
        self.records = []
        self._leaves = {}


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every tracked leaf that ``loss`` depends on."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise TapeError("no tape recorded this loss")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value)
    out.requires_grad = False
    out.grad = None
    out._leaf = False
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# -- elementwise binary ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), back)


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ in {ad.shape} and {bd.shape}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), back)


# -- elementwise unary ----------------------------------------------------


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _result(out, (x,), lambda g: (g * special.expit(xd),))


def lgamma(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(special.gammaln(xd), (x,), lambda g: (g * special.digamma(xd),))


def clip_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > lo
    return _result(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,))


# -- reductions and normalisers -------------------------------------------


def sum_(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim
    return _result(
        x.data.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)
    )


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def softmax(x) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), back)


def attention(q, k, v, mask=None) -> Tensor:
    """Fused ``softmax(q kᵀ / sqrt(d) + mask) v`` over (..., L, d) operands.

    ``mask`` is an additive constant broadcast over leading dimensions.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape[:-2] != kd.shape[:-2] or kd.shape != vd.shape or qd.shape[-1] != kd.shape[-1]:
        raise ShapeError(f"attention: incompatible shapes {qd.shape}, {kd.shape}, {vd.shape}")
    scale = 1.0 / np.sqrt(qd.shape[-1])
    s = qd @ np.swapaxes(kd, -1, -2)
    s *= scale
    if mask is not None:
        s += np.asarray(mask)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    probs = s

    def back(g):
        dv = np.swapaxes(probs, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        dp -= (dp * probs).sum(axis=-1, keepdims=True)
        dp *= probs
        dp *= scale
        return dp @ kd, np.swapaxes(dp, -1, -2) @ qd, dv

    return _result(probs @ vd, (q, k, v), back)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}, {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        return dx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _result(xhat * gd + bias.data, (x, gain, bias), back)


# -- indexing and layout --------------------------------------------------


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=ax), ts, lambda g: tuple(np.split(g, bounds, axis=ax))
    )


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] = g
        return (out,)

    return _result(x.data[key], (x,), back)


def transpose(x, axes: Iterable[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(value, (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of size-1 or missing leading axes."""
    x = as_tensor(x)
    old = x.shape
    shape = tuple(shape)
    try:
        value = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {old} to {shape}") from None
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(lead + i for i, n in enumerate(old) if n == 1 and shape[lead + i] != 1)

    def back(g):
        return (g.sum(axis=axes).reshape(old),)

    return _result(value.copy(), (x,), back)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.data.dtype)
    return mul(x, keep)


# -- finite-difference verification ---------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` closes over ``params`` and returns a scalar tensor. The relative
    error of one entry is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
