"""AdamW with linear warmup and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    warmup: float = 0.1
    total_steps: int = 1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup * self.total_steps))

    def lr_at(self, step: int) -> float:
        """Learning rate used for the ``step``-th update (1-based)."""
        w = self.warmup_steps()
        if w <= 0 or step >= w:
            return self.lr
        return self.lr * step / w


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState) -> None:
    """Apply one decoupled-weight-decay Adam update in place.

    Parameters with no entry in ``grads`` are treated as having zero gradient.
    Every gradient is validated before any parameter is touched, so a rejected
    update leaves both parameters and state unchanged.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * state.weight_decay * p.data - lr * update
