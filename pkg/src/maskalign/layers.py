"""Transformer building blocks over the autodiff engine.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names; every
layer function takes that dict plus its name prefix.  Blocks use pre-norm
residual wiring.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict  # name -> Tensor


def _param(store: Params, name: str, values: np.ndarray) -> None:
    if name in store:
        raise KeyError(f"duplicate parameter {name!r}")
    store[name] = Tensor(values, requires_grad=True, name=name)


def init_linear(store: Params, rng: np.random.Generator, name: str, n_in: int, n_out: int,
                bias_value: float = 0.0) -> None:
    std = math.sqrt(2.0 / (n_in + n_out))
    _param(store, f"{name}.w", rng.normal(0.0, std, size=(n_in, n_out)))
    _param(store, f"{name}.b", np.full(n_out, bias_value))


def init_norm(store: Params, name: str, d: int) -> None:
    _param(store, f"{name}.g", np.ones(d))
    _param(store, f"{name}.b", np.zeros(d))


def init_attention(store: Params, rng, name: str, d: int) -> None:
    for part in ("q", "k", "v", "o"):
        init_linear(store, rng, f"{name}.{part}", d, d)


def init_feedforward(store: Params, rng, name: str, d: int, width: int) -> None:
    init_linear(store, rng, f"{name}.fc1", d, width)
    init_linear(store, rng, f"{name}.fc2", width, d)


def init_self_block(store: Params, rng, name: str, d: int, width: int) -> None:
    init_norm(store, f"{name}.ln1", d)
    init_attention(store, rng, f"{name}.attn", d)
    init_norm(store, f"{name}.ln2", d)
    init_feedforward(store, rng, f"{name}.ff", d, width)


def init_cross_block(store: Params, rng, name: str, d: int, width: int) -> None:
    init_norm(store, f"{name}.ln1", d)
    init_attention(store, rng, f"{name}.self", d)
    init_norm(store, f"{name}.ln2", d)
    init_norm(store, f"{name}.ln_mem", d)
    init_attention(store, rng, f"{name}.cross", d)
    init_norm(store, f"{name}.ln3", d)
    init_feedforward(store, rng, f"{name}.ff", d, width)


def linear(P: Params, name: str, x: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, P[f"{name}.w"]), P[f"{name}.b"])


def norm(P: Params, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def _heads(x: Tensor, n_heads: int) -> Tensor:
    n, d = x.shape
    return ad.transpose(ad.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def attention(P: Params, name: str, query: Tensor, memory: Tensor, n_heads: int,
              additive_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention of ``query`` rows over ``memory`` rows."""
    n, d = query.shape
    q = _heads(linear(P, f"{name}.q", query), n_heads)
    k = _heads(linear(P, f"{name}.k", memory), n_heads)
    v = _heads(linear(P, f"{name}.v", memory), n_heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d // n_heads))
    weights = ad.softmax(scores, additive_mask)
    mixed = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (n, d))
    return linear(P, f"{name}.o", mixed)


def feedforward(P: Params, name: str, x: Tensor) -> Tensor:
    return linear(P, f"{name}.fc2", ad.relu(linear(P, f"{name}.fc1", x)))


def self_block(P: Params, name: str, x: Tensor, n_heads: int,
               additive_mask: np.ndarray | None = None) -> Tensor:
    h = norm(P, f"{name}.ln1", x)
    x = ad.add(x, attention(P, f"{name}.attn", h, h, n_heads, additive_mask))
    return ad.add(x, feedforward(P, f"{name}.ff", norm(P, f"{name}.ln2", x)))


def cross_block(P: Params, name: str, x: Tensor, memory: Tensor, n_heads: int) -> Tensor:
    h = norm(P, f"{name}.ln1", x)
    x = ad.add(x, attention(P, f"{name}.self", h, h, n_heads))
    mem = norm(P, f"{name}.ln_mem", memory)
    x = ad.add(x, attention(P, f"{name}.cross", norm(P, f"{name}.ln2", x), mem, n_heads))
    return ad.add(x, feedforward(P, f"{name}.ff", norm(P, f"{name}.ln3", x)))


def prefix_causal_mask(n_prefix: int, n_text: int) -> np.ndarray:
    """Additive mask: prefix rows see the prefix, text row i sees prefix + text[:i+1]."""
    n = n_prefix + n_text
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:, :n_prefix] = True
    allowed[n_prefix:, n_prefix:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    return np.where(allowed, 0.0, -np.inf)
