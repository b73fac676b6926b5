"""Finite-difference audit of the localizing-stage total loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, finite_difference, relative_error
from .model import Model, ModelConfig
from .pipeline import TrainConfig, localizing_loss
from .synthcorpus import CorpusConfig, generate_corpus

HEAD_PREFIXES = ("loc.mu.", "loc.sigma.")


@dataclass
class AuditEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class AuditReport:
    max_rel_error: float
    n_checked: int
    n_parameters: int
    seconds: float
    entries: list = field(default_factory=list)

    @property
    def worst(self) -> AuditEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    def passed(self, tolerance: float = 1e-3) -> bool:
        return self.max_rel_error <= tolerance


def micro_setup(seed: int = 0):
    """A one-video, two-event problem small enough for exhaustive probing.

    Full vocabulary of 16 tokens: 8 content words, 6 specials, 2 count tokens.
    """
    corpus_cfg = CorpusConfig(n_train=1, n_val=1, min_events=2, max_events=2, n_frames=8, d=16,
                              n_templates=4, caption_length=(2, 4), n_content=8, capacity=2,
                              seed=seed)
    video = generate_corpus(corpus_cfg)["train"].redacted().videos[0]
    model_cfg = ModelConfig(n_content=8, max_events=2, d_model=16, n_heads=4, ff_width=32,
                            n_frames=8, max_text_len=16)
    config = TrainConfig(seed=seed, model=model_cfg)
    return Model.initialize(model_cfg, seed), [video], config


def gradient_audit(model: Model, videos, config: TrainConfig, fraction: float = 0.01,
                   eps: float = 1e-5, seed: int = 0) -> AuditReport:
    """Compare analytic gradients with central differences.

    Probes a random ``fraction`` of all scalar parameters (at least one per
    tensor is not guaranteed) plus every scalar of the localizer heads.
    """
    start = time.perf_counter()
    model.zero_grad()
    with Tape() as tape:
        total = localizing_loss(model, videos, config).total
        tape.backward(total)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in model.params.items()}

    names = sorted(model.params)
    sizes = np.array([model.params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng([seed, 7])
    n_sample = max(1, int(round(fraction * offsets[-1])))
    picked = set(rng.choice(offsets[-1], size=n_sample, replace=False).tolist())
    probes: dict[str, set[int]] = {}
    for flat in picked:
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        probes.setdefault(names[j], set()).add(int(flat - offsets[j]))
    for k in names:
        if k.startswith(HEAD_PREFIXES):
            probes.setdefault(k, set()).update(range(model.params[k].size))

    def loss_value() -> float:
        return localizing_loss(model, videos, config).total.item()

    entries = []
    for k in sorted(probes):
        idx = sorted(probes[k])
        numeric = finite_difference(loss_value, model.params[k], idx, eps)
        exact = analytic[k].reshape(-1)[idx]
        errs = relative_error(exact, numeric)
        entries.extend(AuditEntry(k, i, float(a), float(n), float(e))
                       for i, a, n, e in zip(idx, exact, numeric, errs))
    model.zero_grad()
    return AuditReport(max((e.rel_error for e in entries), default=0.0), len(entries),
                       int(offsets[-1]), time.perf_counter() - start, entries)
