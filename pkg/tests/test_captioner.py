import math

import numpy as np
import pytest

from maskalign import autodiff as ad
from maskalign.autodiff import Tape, Tensor
from maskalign.captioner import (
    captioning_loss,
    captioning_nll,
    decoder_logits,
    encode_video,
    generate,
    generate_captions,
    make_sequence,
)
from maskalign.errors import ContractError, GenerationError, ShapeError
from maskalign.masks import MaskParams, all_ones_mask, build_mask
from maskalign.model import Model, ModelConfig
from maskalign.tokens import FULL, MASKED_POSITIVE

CFG = ModelConfig(n_content=12, max_events=3, d_model=16, n_heads=2, ff_width=32, n_frames=8,
                  max_text_len=24)


@pytest.fixture(scope="module")
def model():
    return Model.initialize(CFG, seed=3)


@pytest.fixture
def frames(rng):
    return rng.normal(size=(CFG.n_frames, CFG.d_model))


class TestEncoder:
    def test_shape(self, model, frames):
        assert encode_video(model, frames).shape == (CFG.n_frames, CFG.d_model)

    def test_wrong_frame_count(self, model, rng):
        with pytest.raises(ShapeError):
            encode_video(model, rng.normal(size=(CFG.n_frames + 1, CFG.d_model)))

    def test_all_ones_mask_is_bit_identical(self, model, frames):
        plain = encode_video(model, frames).data
        masked = encode_video(model, frames, all_ones_mask(CFG.n_frames)).data
        assert plain.tobytes() == masked.tobytes()

    def test_zero_mask_erases_content(self, model, rng):
        zeros = Tensor(np.zeros(CFG.n_frames))
        a = encode_video(model, rng.normal(size=(8, 16)), zeros).data
        b = encode_video(model, rng.normal(size=(8, 16)), zeros).data
        np.testing.assert_array_equal(a, b)

    def test_literal_masked_encoding_drops_positions(self, rng):
        cfg = ModelConfig(**{**CFG.to_dict(), "pos_in_masked_mode": False})
        m = Model.initialize(cfg, seed=3)
        f = rng.normal(size=(8, 16))
        mask = Tensor(np.full(8, 0.5))
        scaled = Model(cfg, {**m.params, "pos": Tensor(np.zeros((8, 16)))})
        np.testing.assert_array_equal(encode_video(m, f, mask).data,
                                      encode_video(scaled, f, mask).data)


class TestDecoder:
    def test_causality(self, model, frames):
        ctx = encode_video(model, frames)
        ids = make_sequence(model, FULL, [[1, 2, 3], [4, 5]]).ids
        base = decoder_logits(model, ctx, ids).data
        for j in range(1, len(ids)):
            changed = list(ids)
            changed[j] = (changed[j] + 1) % CFG.n_content
            out = decoder_logits(model, ctx, changed).data
            np.testing.assert_array_equal(out[:j], base[:j])
            assert not np.allclose(out[j:], base[j:])

    def test_mode_separation(self, model, frames):
        ctx = encode_video(model, frames)
        full = make_sequence(model, FULL, [[1, 2]]).ids
        masked = make_sequence(model, MASKED_POSITIVE, [[1, 2]]).ids
        assert not np.allclose(decoder_logits(model, ctx, full).data,
                               decoder_logits(model, ctx, masked).data)

    def test_too_long(self, model, frames):
        with pytest.raises(ContractError):
            decoder_logits(model, encode_video(model, frames), [1] * (CFG.max_text_len + 1))


class TestLoss:
    def test_uniform_logits_give_log_vocab(self, frames):
        m = Model.initialize(CFG, seed=0)
        m.params["dec.out.w"] = Tensor(np.zeros_like(m.params["dec.out.w"].data))
        m.params["dec.out.b"] = Tensor(np.zeros_like(m.params["dec.out.b"].data))
        loss = captioning_loss(m, encode_video(m, frames), make_sequence(m, FULL, [[1, 2]]))
        assert loss.item() == pytest.approx(math.log(m.vocab.size), abs=1e-12)

    def test_confident_decoder_gives_zero(self, frames):
        m = Model.initialize(CFG, seed=0)
        seq = make_sequence(m, FULL, [[4, 5]]).ids
        # a constant output bias can make only one target certain, so score
        # the two-token prompt alone
        target = seq[1]
        m.params["dec.out.w"] = Tensor(np.zeros_like(m.params["dec.out.w"].data))
        b = np.zeros(m.vocab.size)
        b[target] = 1e4
        m.params["dec.out.b"] = Tensor(b)
        loss = captioning_loss(m, encode_video(m, frames), seq[:2])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_short_sequence_rejected(self, model, frames):
        with pytest.raises(ContractError):
            captioning_loss(model, encode_video(model, frames), [model.vocab.full])

    def test_batch_additivity(self, model, rng):
        seqs = [make_sequence(model, FULL, caps).ids
                for caps in ([[1, 2]], [[3], [4, 5, 6]], [[7, 8], [9], [10]])]
        ctxs = [encode_video(model, rng.normal(size=(8, 16))) for _ in seqs]
        sums, counts = zip(*[captioning_nll(model, c, s) for c, s in zip(ctxs, seqs)])
        batch = sum(s.item() for s in sums) / sum(counts)
        means = [captioning_loss(model, c, s).item() for c, s in zip(ctxs, seqs)]
        weighted = sum(m * n for m, n in zip(means, counts)) / sum(counts)
        assert batch == pytest.approx(weighted, abs=1e-12)

    def test_gradient_reaches_mask_parameters(self, model, frames):
        mu = Tensor(0.4, requires_grad=True)
        seq = make_sequence(model, MASKED_POSITIVE, [[1, 2, 3]])

        def loss_at(m):
            mask = build_mask(MaskParams(m, 0.3, 2.0), CFG.n_frames)
            return captioning_loss(model, encode_video(model, frames, mask), seq)

        with Tape() as tape:
            tape.backward(loss_at(mu))
        eps = 1e-5
        num = (loss_at(0.4 + eps).item() - loss_at(0.4 - eps).item()) / (2 * eps)
        assert mu.grad.item() != 0.0
        assert mu.grad.item() == pytest.approx(num, rel=1e-4)
        model.zero_grad()


class TestGenerate:
    def test_deterministic(self, model, frames):
        ctx = encode_video(model, frames)
        try:
            a = generate(model, ctx).ids
        except GenerationError as err:
            a = err.tokens
        try:
            b = generate(model, ctx).ids
        except GenerationError as err:
            b = err.tokens
        assert a == b

    def test_forced_count(self, model, frames):
        seq = generate(model, encode_video(model, frames), MASKED_POSITIVE, count=1)
        assert seq.ids[:2] == [model.vocab.mask, model.vocab.count_token(1)]
        assert seq.count == 1 and len(seq) <= CFG.max_text_len

    def test_missing_count_token_raises_with_tokens(self, frames):
        m = Model.initialize(CFG, seed=0)
        b = np.zeros(m.vocab.size)
        b[m.vocab.sep] = 1e4
        m.params["dec.out.b"] = Tensor(b)
        with pytest.raises(GenerationError) as info:
            generate(m, encode_video(m, frames))
        assert info.value.tokens[:2] == [m.vocab.full, m.vocab.sep]

    def test_parsed_count_agrees(self, model, frames):
        parsed = generate_captions(model, encode_video(model, frames), MASKED_POSITIVE, count=2)
        assert parsed.count == 2 and len(parsed.captions) <= 2

    def test_refuses_inside_tape(self, model, frames):
        with Tape():
            with pytest.raises(ContractError):
                generate(model, encode_video(model, frames).detach())


def test_no_tape_leak_from_generation(model, frames):
    generate(model, encode_video(model, frames), MASKED_POSITIVE, count=1)
    assert ad.active_tape() is None
