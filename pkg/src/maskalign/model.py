"""Parameter container for the captioner and localizer, plus checkpoint I/O."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import layers
from .autodiff import OptimizerState, Tensor, load_checkpoint, save_checkpoint
from .errors import CompatibilityError
from .tokens import Vocabulary

QUERY_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_content: int = 64
    max_events: int = 8
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    loc_layers: int = 1
    ff_width: int = 128
    n_frames: int = 32
    max_text_len: int = 96
    # add position embeddings to masked frames too (the masked-encoding
    # formula omits them; False reproduces that literally)
    pos_in_masked_mode: bool = True
    use_mode_prompt: bool = True
    use_count_prompt: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_content, self.max_events)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Model:
    """All learnable tensors, keyed by dotted name.

    ``pos`` holds the frame position embeddings shared by the video encoder
    and the localizer.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.vocab = config.vocab

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        d, w = config.d_model, config.ff_width
        P: dict[str, Tensor] = {}
        layers._param(P, "pos", _sinusoid(config.n_frames, d))
        for i in range(config.enc_layers):
            layers.init_self_block(P, rng, f"enc.block{i}", d, w)
        layers.init_norm(P, "enc.ln_out", d)

        layers._param(P, "dec.tok", rng.normal(0.0, 1.0 / math.sqrt(d), (config.vocab.size, d)))
        layers._param(P, "dec.pos", rng.normal(0.0, 1.0 / math.sqrt(d), (config.max_text_len, d)))
        for i in range(config.dec_layers):
            layers.init_self_block(P, rng, f"dec.block{i}", d, w)
        layers.init_norm(P, "dec.ln_out", d)
        layers.init_linear(P, rng, "dec.out", d, config.vocab.size)

        layers._param(P, "loc.queries", rng.normal(0.0, QUERY_INIT_STD, (config.max_events, d)))
        for i in range(config.loc_layers):
            layers.init_cross_block(P, rng, f"loc.block{i}", d, w)
        layers.init_norm(P, "loc.ln_out", d)
        layers.init_linear(P, rng, "loc.mu", d, 1)
        layers.init_linear(P, rng, "loc.sigma", d, 1)
        return cls(config, P)

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k == prefix or k.startswith(prefix + ".")}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> "Model":
        """Independent copy of the parameters (for read-only evaluators)."""
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                   for k, v in self.params.items()})

    def save(self, path, meta: dict | None = None, opt: OptimizerState | None = None) -> None:
        header = {"model_config": self.config.to_dict(), "vocabulary": self.vocab.to_dict()}
        header.update(meta or {})
        save_checkpoint(path, self.params, header, opt)

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None):
        """Returns ``(model, meta, optimizer_state)``."""
        params, meta, opt = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["model_config"])
        if vocab is not None and Vocabulary.from_dict(meta["vocabulary"]) != vocab:
            raise CompatibilityError("checkpoint vocabulary differs from the corpus vocabulary")
        return cls(config, params), meta, opt


def _sinusoid(n: int, d: int, scale: float = 0.1) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2, dtype=np.float64) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return scale * table
