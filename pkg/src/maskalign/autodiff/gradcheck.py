"""Central finite differences for auditing analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor

# gradients below this magnitude are compared absolutely; float64 central
# differences at eps=1e-5 carry roughly 1e-10 of round-off noise
GRAD_FLOOR = 1e-7


def finite_difference(loss_fn: Callable[[], float], tensor: Tensor,
                      flat_indices: Iterable[int], eps: float = 1e-5) -> np.ndarray:
    """d loss / d tensor at the given flat positions, by central differences.

    ``loss_fn`` must recompute the loss from the current ``tensor.data``; the
    tensor is restored exactly after each probe.
    """
    flat = tensor.data.reshape(-1)
    out = []
    for i in flat_indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        out.append((up - down) / (2.0 * eps))
    return np.array(out)


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
