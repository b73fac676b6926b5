"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` context are recorded
together with their local backward rule; ``Tape.backward(loss)`` then walks
the record in reverse and accumulates gradients into every leaf tensor that
was created with ``requires_grad=True``.  Outside a tape, operations are plain
numpy computations and nothing is recorded (inference mode).

Broadcasting is deliberately narrow: binary elementwise operations accept
equal shapes or a size-1 operand (scalar broadcast).  Row/column broadcasts
needed by the network layers are separate named operations
(:func:`add_bias`, :func:`scale_rows`).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, DomainError, NumericError, ShapeError

LN_EPS = 1e-5

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.  A tape is
    owned by a single thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(inputs, backward))

    def backward(self, loss: "Tensor") -> None:
        """Populate ``.grad`` of every leaf reachable from ``loss``."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for idx in range(loss._node, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    prev = pending.get(t._node)
                    pending[t._node] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64).reshape(t.data.shape)
                else:
                    t.grad = t.grad + gi.reshape(t.data.shape)


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t):
    raise ContractError(f"item() on non-scalar tensor of shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out._node = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar broadcasting is supported, so the reduction is a full sum
    return np.full(shape, g.sum())


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")
    return a, b


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError("division by zero")
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflow")
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    if np.any(out == 0.0):
        raise DomainError("sqrt gradient undefined at zero")
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0.0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    keep = out == a.data
    return _result(out, (a,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a, key) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _result(a.data[key], (a,), backward)


def take_rows(table, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of a 2-D table selected by integer ids."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Gather size-1 tensors into a 1-D vector."""
    return concat([reshape(p, (1,)) for p in parts], axis=0)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    out = a.data.sum(axis=axis)
    return _result(out, (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def add_bias(x, bias) -> Tensor:
    """``x + bias`` with ``bias`` broadcast along every leading axis."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias {bias.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def scale_rows(x, scale) -> Tensor:
    """Multiply row ``i`` of a 2-D tensor by ``scale[i]``."""
    x, scale = _as_tensor(x), _as_tensor(scale)
    if x.data.ndim != 2 or scale.shape != (x.shape[0],):
        raise ShapeError(f"row scale {scale.shape} does not match {x.shape}")
    xd, sd = x.data, scale.data
    return _result(xd * sd[:, None], (x, scale),
                   lambda g: (g * sd[:, None], (g * xd).sum(axis=1)))


# --------------------------------------------------------------------------
# fused numerics
# --------------------------------------------------------------------------


def softmax(x, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``additive_mask`` is a constant (e.g. -inf)."""
    x = _as_tensor(x)
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward)


def softmax_cross_entropy(logits, targets: Sequence[int], reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target index outside [0, {vocab})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), targets]
    if reduction == "mean":
        scale = 1.0 / n
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.asarray(nll.sum() * scale)

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), targets] -= 1.0
        return (p * (g * scale),)

    return _result(value, (logits,), backward)


def layer_norm(x, gain, bias) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centered * inv
    gd = gain.data
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)
