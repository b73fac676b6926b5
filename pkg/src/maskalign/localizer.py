"""Event-query decoder that predicts a (center, width) pair per event."""

from __future__ import annotations

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import CapacityError, ShapeError
from .masks import DEFAULT_TAU, MaskParams
from .model import Model


def localize(model: Model, frames, n_events: int, tau: float = DEFAULT_TAU,
             family: str = "gaussian") -> list[MaskParams]:
    """Mask parameters for the first ``n_events`` event queries, in query order.

    Queries attend to the raw frame features plus the shared position
    embeddings.  ``mu`` and ``sigma`` come back as size-1 tensors so masks built
    from them stay differentiable.
    """
    cfg = model.config
    P = model.params
    if not 1 <= n_events <= cfg.max_events:
        raise CapacityError(f"{n_events} events outside 1..{cfg.max_events}")
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames.shape != (cfg.n_frames, cfg.d_model):
        raise ShapeError(f"frames {frames.shape} do not match ({cfg.n_frames}, {cfg.d_model})")
    memory = ad.add(frames, P["pos"])
    h = ad.index(P["loc.queries"], slice(0, n_events))
    for i in range(cfg.loc_layers):
        h = layers.cross_block(P, f"loc.block{i}", h, memory, cfg.n_heads)
    h = layers.norm(P, "loc.ln_out", h)
    mu = ad.sigmoid(layers.linear(P, "loc.mu", h))
    sigma = ad.sigmoid(layers.linear(P, "loc.sigma", h))
    return [MaskParams(ad.index(mu, (i, 0)), ad.index(sigma, (i, 0)), tau, family)
            for i in range(n_events)]
