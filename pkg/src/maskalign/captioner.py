"""Video encoder, prefix-conditioned caption decoder and captioning losses."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import ContractError, GenerationError, ShapeError
from .masks import Mask
from .model import Model
from .tokens import (
    FULL,
    MASKED_NEGATIVE,
    MASKED_POSITIVE,
    ParsedCaptions,
    TokenSeq,
    parse_generated,
    tokenize,
)


def encode_video(model: Model, frames, mask: Mask | Tensor | None = None) -> Tensor:
    """Contextual frame embeddings, optionally after scaling each frame by a mask."""
    cfg = model.config
    P = model.params
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames.shape != (cfg.n_frames, cfg.d_model):
        raise ShapeError(f"frames {frames.shape} do not match position table "
                         f"({cfg.n_frames}, {cfg.d_model})")
    if mask is None:
        x = ad.add(frames, P["pos"])
    else:
        values = mask.values if isinstance(mask, Mask) else mask
        x = ad.scale_rows(frames, values)
        if cfg.pos_in_masked_mode:
            x = ad.add(x, P["pos"])
    for i in range(cfg.enc_layers):
        x = layers.self_block(P, f"enc.block{i}", x, cfg.n_heads)
    return layers.norm(P, "enc.ln_out", x)


def decoder_logits(model: Model, context: Tensor, ids) -> Tensor:
    """Next-token logits for every text position (row i predicts token i+1)."""
    cfg = model.config
    P = model.params
    n_text = len(ids)
    if n_text > cfg.max_text_len:
        raise ContractError(f"sequence of {n_text} tokens exceeds max_text_len {cfg.max_text_len}")
    text = ad.add(ad.take_rows(P["dec.tok"], ids), ad.index(P["dec.pos"], slice(0, n_text)))
    n_prefix = context.shape[0]
    z = ad.concat([context, text], axis=0)
    mask = layers.prefix_causal_mask(n_prefix, n_text)
    for i in range(cfg.dec_layers):
        z = layers.self_block(P, f"dec.block{i}", z, cfg.n_heads, mask)
    z = layers.norm(P, "dec.ln_out", ad.index(z, slice(n_prefix, None)))
    return layers.linear(P, "dec.out", z)


def captioning_nll(model: Model, context: Tensor, seq: TokenSeq | list[int]) -> tuple[Tensor, int]:
    """Summed teacher-forced NLL of tokens 2..N and the number of predicted tokens."""
    ids = list(seq.ids if isinstance(seq, TokenSeq) else seq)
    if len(ids) < 2:
        raise ContractError("captioning loss needs at least two tokens")
    logits = decoder_logits(model, context, ids[:-1])
    return ad.softmax_cross_entropy(logits, ids[1:], reduction="sum"), len(ids) - 1


def captioning_loss(model: Model, context: Tensor, seq: TokenSeq | list[int]) -> Tensor:
    """Mean NLL over predicted positions; serves full, positive and negative modes alike."""
    total, n = captioning_nll(model, context, seq)
    return ad.mul(total, 1.0 / n)


def make_sequence(model: Model, mode: str, captions) -> TokenSeq:
    cfg = model.config
    return tokenize(model.vocab, mode, len(captions), captions,
                    use_mode=cfg.use_mode_prompt, use_count=cfg.use_count_prompt)


def _prompt(model: Model, mode: str, count: int | None) -> list[int]:
    vocab = model.vocab
    ids = [vocab.mode_token(mode) if model.config.use_mode_prompt else vocab.begin]
    if count is not None and model.config.use_count_prompt:
        ids.append(vocab.count_token(count))
    return ids


def generate(model: Model, context: Tensor, mode: str = FULL, max_len: int | None = None,
             count: int | None = None, seed: int = 0) -> TokenSeq:
    """Greedy decoding from a mode prompt.

    With ``count=None`` the model chooses the count token itself; otherwise the
    count token is forced (used for refinement with a single event).  Decoding
    stops once the declared number of separators has been produced, at
    ``<eos>``, or at ``max_len``.  Greedy argmax breaks ties toward the lowest
    token id, so ``seed`` has no effect; it is accepted for interface
    stability with sampling decoders.
    """
    del seed
    cfg = model.config
    vocab = model.vocab
    max_len = min(max_len or cfg.max_text_len, cfg.max_text_len)
    if ad.active_tape() is not None:
        raise ContractError("generate must run outside a recording tape")
    context = context.detach()
    ids = _prompt(model, mode, count)
    declared = count
    need_count = cfg.use_count_prompt and count is None
    seps = 0
    while len(ids) < max_len:
        logits = decoder_logits(model, context, ids)
        nxt = int(np.argmax(logits.data[-1]))
        ids.append(nxt)
        if need_count:
            declared = vocab.count_of(nxt)
            if declared is None:
                raise GenerationError("decoder did not emit a count token", ids)
            need_count = False
            continue
        if nxt == vocab.end:
            break
        if nxt == vocab.sep:
            seps += 1
            if declared is not None and seps >= declared:
                ids.append(vocab.end)
                break
    if need_count:
        raise GenerationError("decoder did not emit a count token", ids)
    if declared is None:
        declared = max(seps, 1)
    return TokenSeq(ids, mode, declared)


def generate_captions(model: Model, context: Tensor, mode: str = FULL,
                      count: int | None = None) -> ParsedCaptions:
    seq = generate(model, context, mode, count=count)
    return parse_generated(model.vocab, seq, expect_count=model.config.use_count_prompt)


__all__ = [
    "FULL", "MASKED_NEGATIVE", "MASKED_POSITIVE", "captioning_loss", "captioning_nll",
    "decoder_logits", "encode_video", "generate", "generate_captions", "make_sequence",
]
