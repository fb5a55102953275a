"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray (float32 by default, float64 supported for
gradient checking). Ops executed while a Tape is active append a record
(output, backward rule); ``backward(loss)`` replays the records in reverse
execution order, which is a valid reverse topological order because records
are appended at creation time. Gradients accumulate with ``+=`` so a tensor
used several times receives the sum of its contributions exactly once per
use.

Only the ops the repo needs exist here. Everything is batch-shaped: the last
axes carry the op semantics (rows for softmax, trailing two axes for matmul)
and any leading axes broadcast.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RngStream


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an op is called outside its contract (e.g. non-scalar loss)."""


class ParameterError(ValueError):
    """Raised for invalid op parameters (e.g. non-positive temperature)."""


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops for one computation.

    One tape per computation; tapes on different threads never share state.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Accumulated d(loss)/d(self); zeros until backward touches it."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self._grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


def _record(out: Tensor, needs: bool, backward: Callable[[np.ndarray], None]):
    tape = active_tape()
    if tape is not None and needs:
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, a.requires_grad or b.requires_grad, backward)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _record(out, a.requires_grad or b.requires_grad, backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, a.requires_grad or b.requires_grad, backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out = Tensor(a.data / b.data, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, a.requires_grad or b.requires_grad, backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(-g)

    return _record(out, a.requires_grad, backward)


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data**p, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * p * a.data ** (p - 1))

    return _record(out, a.requires_grad, backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * y)

    return _record(out, a.requires_grad, backward)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g / a.data)

    return _record(out, a.requires_grad, backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    out = Tensor(y, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * y * (1.0 - y))

    return _record(out, a.requires_grad, backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * (1.0 - y * y))

    return _record(out, a.requires_grad, backward)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    out = Tensor(y, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0))

    return _record(out, a.requires_grad, backward)


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); subgradient 0 on the flat side."""
    y = np.maximum(a.data, floor)
    out = Tensor(y, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * (a.data > floor))

    return _record(out, a.requires_grad, backward)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _record(out, a.requires_grad, backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes), dtype=a.dtype)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        a.accumulate_grad(np.transpose(g, inv))

    return _record(out, a.requires_grad, backward)


def swap_last2(a: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(a.data, -1, -2), dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(np.swapaxes(g, -1, -2))

    return _record(out, a.requires_grad, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy(), dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))

    return _record(out, a.requires_grad, backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    datas = [p.data for p in parts]
    out = Tensor(np.concatenate(datas, axis=axis), dtype=parts[0].dtype)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(idx)])

    return _record(out, any(p.requires_grad for p in parts), backward)


def take(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx], dtype=a.dtype)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate_grad(full)

    return _record(out, a.requires_grad, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], dtype=table.dtype)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table.accumulate_grad(full)

    return _record(out, table.requires_grad, backward)


# -- reductions -----------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())

    return _record(out, a.requires_grad, backward)


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- matmul ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(b, a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _record(out, a.requires_grad or b.requires_grad, backward)


# -- composite layers -------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = mean_(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean_(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    d = sub(pred, target)
    return mean_(mul(d, d))


# -- masked softmax ---------------------------------------------------------


def masked_softmax(logits: Tensor, mask: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax over the last axis restricted to entries with mask > 0.

    out_j = mask_j * exp(scale*logits_j) / sum_j' mask_j' * exp(scale*logits_j')

    The max over *active* logits is subtracted before exponentiation (inactive
    logits never enter, so a huge masked-out logit cannot overflow or shift
    rounding of the active ones). Rows whose mask is entirely zero produce an
    all-zero row instead of NaN. Gradients flow to both logits and mask; for a
    fully masked row both gradients are zero.
    """
    s = scale * logits.data
    m = mask.data
    active = m > 0
    # rows with no active entry: neutral max of 0 keeps exp finite
    mx = np.where(active, s, -np.inf).max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    # f is kept for masked-out entries too: the mask gradient at m_j = 0 needs
    # the weight entry j *would* have. The clip only bites for masked logits
    # far above the active max, where the exact ratio would overflow anyway.
    f = np.exp(np.clip(s - mx, -60.0, 20.0))
    e = m * f
    z = e.sum(axis=-1, keepdims=True)
    live = z > 0
    zsafe = np.where(live, z, 1.0)
    y = e / zsafe
    out = Tensor(y.astype(logits.dtype, copy=False), dtype=logits.dtype)

    def backward(g):
        gdot = (g * y).sum(axis=-1, keepdims=True)
        if logits.requires_grad:
            logits.accumulate_grad(scale * y * (g - gdot))
        if mask.requires_grad:
            # d out_i / d mask_j = (delta_ij f_j - out_i f_j) / z on live rows.
            # f/z explodes when every mask entry of a row is ~0 (the chained
            # gradient through a sigmoid mask stays bounded, but this
            # intermediate would overflow float32 first); the clip keeps a
            # finite, correctly-signed signal in that regime.
            ratio = np.clip(np.where(live, f / zsafe, 0.0), 0.0, 1e8)
            mask.accumulate_grad(ratio * (g - gdot))

    return _record(out, logits.requires_grad or mask.requires_grad, backward)


# -- stochastic relaxation ----------------------------------------------------


def gumbel_sigmoid(logit: Tensor, temperature: float, rng: RngStream, hard: bool = True) -> Tensor:
    """Binary-concrete sample with optional straight-through hard forward.

    Draws logistic noise g, forms y = sigmoid((logit + g)/temperature). With
    hard=True the forward value is 1[y > 0.5] while the backward rule uses the
    soft sample's derivative (straight-through); otherwise the soft value is
    returned.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    noise = rng.logistic(logit.data.shape).astype(logit.data.dtype)
    y = _stable_sigmoid((logit.data + noise) / temperature)
    fwd = (y > 0.5).astype(logit.data.dtype) if hard else y
    out = Tensor(fwd, dtype=logit.dtype)

    def backward(g):
        logit.accumulate_grad(g * y * (1.0 - y) / temperature)

    return _record(out, logit.requires_grad, backward)


# -- backward ---------------------------------------------------------------


def backward(loss: Tensor):
    """Populate grads of every requires_grad ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
            return
        raise ContractError("loss was not recorded on any tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, rule in reversed(tape.records):
        if out._grad is not None:
            rule(out._grad)
