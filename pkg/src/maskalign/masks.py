"""Differentiable temporal masks over a video's frame axis.

Frame ``t`` (1-based) of an ``n_frames`` video sits at normalized time
``t / n_frames``.  A mask is parameterized by a center ``mu`` and a width
``sigma`` (both in (0, 1)) plus a steepness ``tau``.  ``mu`` and ``sigma`` may
be plain floats or size-1 :class:`Tensor` objects; in the latter case the
mask values are recorded on the active tape and gradients flow back into
whatever produced them.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

FAMILIES = ("gaussian", "hard-binary", "sigmoid", "cauchy")
SIGMA_FLOOR = 1e-4
DEFAULT_TAU = 2.0
DEFAULT_GAMMA = 0.8
# boundary slack for the hard interval, so frames lying on an edge up to
# floating-point rounding count as inside
_EDGE_TOL = 1e-12


class DegenerateWidthWarning(RuntimeWarning):
    pass


class ZeroNormMaskWarning(RuntimeWarning):
    pass


@dataclass
class MaskParams:
    mu: float | Tensor
    sigma: float | Tensor
    tau: float = DEFAULT_TAU
    family: str = "gaussian"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown mask family {self.family!r}; choose from {FAMILIES}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def mu_value(self) -> float:
        return _scalar(self.mu)

    @property
    def sigma_value(self) -> float:
        return _scalar(self.sigma)

    def detached(self) -> "MaskParams":
        return MaskParams(self.mu_value, self.sigma_value, self.tau, self.family)


@dataclass
class Mask:
    values: Tensor
    params: MaskParams
    polarity: str = "positive"

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def numpy(self) -> np.ndarray:
        return self.values.data


def _scalar(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def frame_times(n_frames: int) -> np.ndarray:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    return np.arange(1, n_frames + 1, dtype=np.float64) / n_frames


def _floored_sigma(sigma):
    if _scalar(sigma) < SIGMA_FLOOR:
        warnings.warn(f"mask width {_scalar(sigma):.3g} clamped to {SIGMA_FLOOR}",
                      DegenerateWidthWarning, stacklevel=3)
    return ad.clamp(sigma, lo=SIGMA_FLOOR)


def mask_values(params: MaskParams, times) -> Tensor:
    """Evaluate the mask family at arbitrary normalized times."""
    times = np.asarray(times, dtype=np.float64)
    mu, tau = params.mu, params.tau
    family = params.family
    if family == "gaussian":
        width = ad.mul(_floored_sigma(params.sigma), 1.0 / tau)
        z = ad.div(ad.sub(times, mu), width)
        return ad.exp(ad.mul(ad.square(z), -0.5))
    if family == "cauchy":
        # density divided by its peak value 1 / (pi * scale)
        scale2 = ad.square(ad.mul(_floored_sigma(params.sigma), 1.0 / tau))
        return ad.div(scale2, ad.add(ad.square(ad.sub(times, mu)), scale2))
    if family == "sigmoid":
        half = ad.mul(params.sigma, 0.5)
        left = ad.sigmoid(ad.mul(ad.sub(times, ad.sub(mu, half)), tau))
        right = ad.sigmoid(ad.mul(ad.sub(ad.add(mu, half), times), tau))
        return ad.mul(left, right)
    # hard-binary: piecewise constant, so the gradient is identically zero
    m, s = params.mu_value, params.sigma_value
    inside = ((times >= m - s / 2 - _EDGE_TOL) & (times <= m + s / 2 + _EDGE_TOL)).astype(np.float64)
    zero = ad.mul(ad.add(mu, params.sigma), 0.0)
    return ad.add(Tensor(inside), zero)


def build_mask(params: MaskParams, n_frames: int) -> Mask:
    return Mask(mask_values(params, frame_times(n_frames)), params, "positive")


def gaussian_mask(params: MaskParams, n_frames: int) -> Mask:
    return build_mask(_with_family(params, "gaussian"), n_frames)


def hard_binary_mask(params: MaskParams, n_frames: int) -> Mask:
    return build_mask(_with_family(params, "hard-binary"), n_frames)


def sigmoid_mask(params: MaskParams, n_frames: int) -> Mask:
    return build_mask(_with_family(params, "sigmoid"), n_frames)


def cauchy_mask(params: MaskParams, n_frames: int) -> Mask:
    return build_mask(_with_family(params, "cauchy"), n_frames)


def _with_family(params: MaskParams, family: str) -> MaskParams:
    if params.family == family:
        return params
    return MaskParams(params.mu, params.sigma, params.tau, family)


def negative_mask(mask: Mask) -> Mask:
    if mask.polarity != "positive":
        raise ContractError("negative_mask expects a positive mask")
    return Mask(ad.sub(1.0, mask.values), mask.params, "negative")


def all_ones_mask(n_frames: int) -> Mask:
    return Mask(Tensor(np.ones(n_frames)), MaskParams(0.5, 1.0, 1.0, "hard-binary"))


# --------------------------------------------------------------------------
# diversity regularizer
# --------------------------------------------------------------------------


def pairwise_hinge(similarity, gamma: float) -> Tensor:
    """Mean of ``max(s_ij - gamma, 0)`` over ordered off-diagonal pairs."""
    similarity = similarity if isinstance(similarity, Tensor) else Tensor(similarity)
    n = similarity.shape[0]
    if n < 2:
        return Tensor(0.0)
    off = 1.0 - np.eye(n)
    hinge = ad.mul(ad.relu(ad.sub(similarity, gamma)), Tensor(off))
    return ad.mul(ad.sum(hinge), 1.0 / (n * (n - 1)))


def cosine_matrix(masks: Sequence[Mask | Tensor]) -> Tensor:
    rows = [m.values if isinstance(m, Mask) else m for m in masks]
    length = rows[0].shape
    if any(r.shape != length for r in rows):
        raise ShapeError("masks must all have the same length")
    mat = ad.concat([ad.reshape(r, (1, -1)) for r in rows], axis=0)
    peak = np.max(np.abs(mat.data), axis=1)
    dead = peak < np.finfo(np.float64).tiny
    if dead.any():
        warnings.warn("zero-norm mask in diversity loss; its cosines are set to 0",
                      ZeroNormMaskWarning, stacklevel=3)
    # rescale rows by exact powers of two so squared norms cannot underflow;
    # cosines are unchanged and identical rows still give exactly 1
    _, exps = np.frexp(np.where(dead, 1.0, peak))
    mat = ad.scale_rows(mat, Tensor(np.ldexp(1.0, -exps)))
    gram = ad.matmul(mat, ad.transpose(mat))
    n = len(rows)
    diag = ad.index(gram, (np.arange(n), np.arange(n)))
    safe = ad.add(diag, Tensor(dead.astype(np.float64)))
    outer = ad.matmul(ad.reshape(safe, (-1, 1)), ad.reshape(safe, (1, -1)))
    cos = ad.div(gram, ad.sqrt(outer))
    if dead.any():
        alive = (~dead).astype(np.float64)
        cos = ad.mul(cos, Tensor(np.outer(alive, alive)))
    return cos


def diversity_loss(masks: Sequence[Mask | Tensor], gamma: float = DEFAULT_GAMMA) -> Tensor:
    """Hinge on pairwise cosine similarity of masks above ``gamma``.

    Defined as exactly 0 for a single mask.
    """
    if len(masks) == 0:
        raise ValueError("diversity_loss needs at least one mask")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if len(masks) == 1:
        return Tensor(0.0)
    return pairwise_hinge(cosine_matrix(masks), gamma)


# --------------------------------------------------------------------------
# mask -> segment
# --------------------------------------------------------------------------


def mask_to_segment(params: MaskParams) -> tuple[float, float]:
    """Interval ``[mu - sigma/2, mu + sigma/2]`` clipped to [0, 1]."""
    m, s = params.mu_value, params.sigma_value
    start = min(max(m - s / 2, 0.0), 1.0)
    end = min(max(m + s / 2, 0.0), 1.0)
    return start, end


def support_segment(mask: Mask) -> tuple[float, float] | None:
    """Normalized-time span of the nonzero frames of a mask."""
    nz = np.flatnonzero(mask.values.data > 0)
    if nz.size == 0:
        return None
    times = frame_times(mask.n_frames)
    return float(times[nz[0]]), float(times[nz[-1]])


def write_mask_csv(path, masks: Iterable[Mask]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "normalized_time", "value", "family", "mu", "sigma", "tau"])
        for mask in masks:
            p = mask.params
            times = frame_times(mask.n_frames)
            for i, (t, v) in enumerate(zip(times, mask.values.data), start=1):
                w.writerow([i, repr(float(t)), repr(float(v)), p.family,
                            repr(p.mu_value), repr(p.sigma_value), repr(float(p.tau))])
