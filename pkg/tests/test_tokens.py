import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskalign.errors import CapacityError, ContractError, ParseError
from maskalign.tokens import (
    FULL,
    MASKED_NEGATIVE,
    MASKED_POSITIVE,
    MODES,
    Vocabulary,
    parse_generated,
    tokenize,
)

V = Vocabulary(64, 8)


def captions_strategy(vocab=V):
    word = st.integers(0, vocab.n_content - 1)
    return st.lists(st.lists(word, min_size=1, max_size=8), min_size=1, max_size=vocab.max_events)


class TestVocabulary:
    def test_layout(self):
        assert V.size == 64 + 6 + 8
        specials = {V.pad, V.begin, V.end, V.sep, V.full, V.mask}
        assert len(specials) == 6 and not any(V.is_content(t) for t in specials)
        assert [V.count_token(k) for k in (1, 8)] == [70, 77]

    def test_count_token_round_trip(self):
        for k in range(1, 9):
            assert V.count_of(V.count_token(k)) == k
        assert V.count_of(V.sep) is None and V.count_of(3) is None

    def test_capacity(self):
        with pytest.raises(CapacityError):
            V.count_token(9)
        with pytest.raises(CapacityError):
            V.count_token(0)

    def test_strings(self):
        assert V.token_str(V.count_token(1)) == "1 events:"
        assert V.detokenize([V.full, V.count_token(2), 5, V.sep]) == "[FULL] 2 events: w05 <sep>"

    def test_serialization(self):
        assert Vocabulary.from_dict(V.to_dict()) == V
        bad = V.to_dict()
        bad["tokens"] = bad["tokens"][::-1]
        with pytest.raises(ValueError):
            Vocabulary.from_dict(bad)


class TestTokenize:
    def test_full_mode_example(self):
        a, b, c = 3, 9, 12
        seq = tokenize(V, FULL, 2, [[a, b], [c]])
        assert seq.ids == [V.full, V.count_token(2), a, b, V.sep, c, V.sep, V.end]

    def test_mask_prefix(self):
        seq = tokenize(V, MASKED_POSITIVE, 1, [[4]])
        assert seq.ids[:2] == [V.mask, V.count_token(1)]
        assert V.detokenize(seq.ids[:2]) == "[MASK] 1 events:"

    def test_errors(self):
        with pytest.raises(CapacityError):
            tokenize(V, FULL, 9, [[1]] * 9)
        with pytest.raises(ContractError):
            tokenize(V, FULL, 2, [[1]])
        with pytest.raises(ContractError):
            tokenize(V, FULL, 1, [[]])
        with pytest.raises(ContractError):
            tokenize(V, FULL, 1, [[V.sep]])
        with pytest.raises(ValueError):
            tokenize(V, "other", 1, [[1]])

    def test_prompt_ablations(self):
        seq = tokenize(V, FULL, 1, [[2]], use_mode=False, use_count=False)
        assert seq.ids == [V.begin, 2, V.sep, V.end]
        parsed = parse_generated(V, seq, expect_count=False)
        assert parsed.captions == [[2]] and parsed.count == 1

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from(MODES), captions_strategy())
    def test_round_trip(self, mode, caps):
        seq = tokenize(V, mode, len(caps), caps)
        parsed = parse_generated(V, seq)
        assert parsed.captions == caps and parsed.count == len(caps) and parsed.flags == []
        assert seq.ids.count(V.sep) == len(caps)


class TestParse:
    def test_short_output(self):
        ids = [V.full, V.count_token(3), 1, 2, V.sep, 3, V.sep, V.end]
        parsed = parse_generated(V, ids)
        assert parsed.captions == [[1, 2], [3]]
        assert "count-mismatch" in parsed.flags

    def test_surplus_truncated(self):
        ids = [V.full, V.count_token(1), 1, V.sep, 2, V.sep, V.end]
        parsed = parse_generated(V, ids)
        assert parsed.captions == [[1]] and "count-mismatch" in parsed.flags

    def test_empty_sentence_dropped(self):
        ids = [V.full, V.count_token(2), 1, V.sep, V.sep, 2, V.sep, V.end]
        parsed = parse_generated(V, ids)
        assert parsed.captions == [[1], [2]] and parsed.flags == ["empty-sentence"]

    def test_stray_special_and_unterminated(self):
        ids = [V.mask, V.count_token(1), 1, V.full, 2]
        parsed = parse_generated(V, ids)
        assert parsed.captions == [[1, 2]]
        assert parsed.flags == ["stray-special", "unterminated"]

    def test_missing_count(self):
        with pytest.raises(ParseError):
            parse_generated(V, [V.full, 3, V.sep])
        with pytest.raises(ParseError):
            parse_generated(V, [])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, V.size - 1), max_size=30))
    def test_parse_never_exceeds_declared_count(self, tail):
        ids = [V.full, V.count_token(3)] + tail
        parsed = parse_generated(V, ids)
        assert parsed.count == 3 and len(parsed.captions) <= 3
        assert all(c and all(V.is_content(t) for t in c) for c in parsed.captions)


@pytest.mark.parametrize("mode", [MASKED_POSITIVE, MASKED_NEGATIVE])
def test_masked_modes_share_the_mask_token(mode):
    assert V.mode_token(mode) == V.mask
