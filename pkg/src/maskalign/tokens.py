"""Closed vocabulary, prompt tokenization and parsing of decoder output.

A tokenized sequence looks like::

    [MODE, "k events:", w, w, SEP, w, w, w, SEP, ..., END]

where MODE is ``[FULL]`` or ``[MASK]`` and ``k`` is the number of
SEP-terminated sentences that follow.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import CapacityError, ContractError, ParseError

FULL = "full"
MASKED_POSITIVE = "masked-positive"
MASKED_NEGATIVE = "masked-negative"
MODES = (FULL, MASKED_POSITIVE, MASKED_NEGATIVE)

_SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "[FULL]", "[MASK]")


@dataclass(frozen=True)
class Vocabulary:
    """Dense id space: content tokens first, then specials, then count tokens."""

    n_content: int = 64
    max_events: int = 8

    def __post_init__(self):
        if self.n_content < 1 or self.max_events < 1:
            raise ValueError("vocabulary needs at least one content token and one count token")

    @property
    def size(self) -> int:
        return self.n_content + len(_SPECIALS) + self.max_events

    def _special(self, i: int) -> int:
        return self.n_content + i

    @property
    def pad(self) -> int:
        return self._special(0)

    @property
    def begin(self) -> int:
        return self._special(1)

    @property
    def end(self) -> int:
        return self._special(2)

    @property
    def sep(self) -> int:
        return self._special(3)

    @property
    def full(self) -> int:
        return self._special(4)

    @property
    def mask(self) -> int:
        return self._special(5)

    def count_token(self, k: int) -> int:
        if not 1 <= k <= self.max_events:
            raise CapacityError(f"event count {k} outside 1..{self.max_events}")
        return self.n_content + len(_SPECIALS) + k - 1

    def count_of(self, token: int) -> int | None:
        k = token - (self.n_content + len(_SPECIALS)) + 1
        return k if 1 <= k <= self.max_events else None

    def mode_token(self, mode: str) -> int:
        if mode == FULL:
            return self.full
        if mode in (MASKED_POSITIVE, MASKED_NEGATIVE):
            return self.mask
        raise ValueError(f"unknown mode {mode!r}")

    def is_content(self, token: int) -> bool:
        return 0 <= token < self.n_content

    def token_str(self, token: int) -> str:
        if self.is_content(token):
            return f"w{token:02d}"
        k = self.count_of(token)
        if k is not None:
            return f"{k} events:"
        return _SPECIALS[token - self.n_content]

    def listing(self) -> list[str]:
        return [self.token_str(i) for i in range(self.size)]

    def detokenize(self, tokens: Sequence[int]) -> str:
        return " ".join(self.token_str(t) for t in tokens)

    def to_dict(self) -> dict:
        return {"n_content": self.n_content, "max_events": self.max_events,
                "tokens": self.listing()}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        vocab = cls(int(d["n_content"]), int(d["max_events"]))
        if "tokens" in d and list(d["tokens"]) != vocab.listing():
            raise ValueError("vocabulary listing does not match its declared sizes")
        return vocab


@dataclass
class TokenSeq:
    ids: list[int]
    mode: str
    count: int

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ParsedCaptions:
    count: int
    captions: list[list[int]]
    flags: list[str] = field(default_factory=list)


def tokenize(vocab: Vocabulary, mode: str, count: int, captions: Sequence[Sequence[int]],
             use_mode: bool = True, use_count: bool = True) -> TokenSeq:
    """Build the prompt-plus-captions sequence.

    ``use_mode`` / ``use_count`` exist for prompt ablations: a dropped mode
    token is replaced by ``<bos>``, a dropped count token is omitted.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if count > vocab.max_events:
        raise CapacityError(f"{count} events exceed capacity {vocab.max_events}")
    if count < 1:
        raise CapacityError("a token sequence holds at least one caption")
    if len(captions) != count:
        raise ContractError(f"declared {count} events but got {len(captions)} captions")
    ids = [vocab.mode_token(mode) if use_mode else vocab.begin]
    if use_count:
        ids.append(vocab.count_token(count))
    for cap in captions:
        if len(cap) == 0:
            raise ContractError("empty caption")
        if not all(vocab.is_content(t) for t in cap):
            raise ContractError(f"caption contains non-content tokens: {list(cap)}")
        ids.extend(int(t) for t in cap)
        ids.append(vocab.sep)
    ids.append(vocab.end)
    return TokenSeq(ids, mode, count)


def parse_generated(vocab: Vocabulary, seq: TokenSeq | Sequence[int],
                    expect_count: bool = True) -> ParsedCaptions:
    """Split decoder output into captions.

    The sentence list is truncated to the declared count; a shortfall or
    surplus is reported as ``count-mismatch``.  Empty sentences are dropped
    (``empty-sentence``), special tokens inside a sentence are removed
    (``stray-special``) and a trailing sentence without a separator is kept
    (``unterminated``).
    """
    ids = list(seq.ids if isinstance(seq, TokenSeq) else seq)
    if not ids:
        raise ParseError("empty sequence")
    flags: list[str] = []
    if expect_count:
        k = vocab.count_of(ids[1]) if len(ids) > 1 else None
        if k is None:
            raise ParseError(f"missing count token in {ids[:4]}")
        body = ids[2:]
    else:
        k = None
        body = ids[1:]

    sentences: list[list[int]] = []
    current: list[int] = []
    terminated = False
    for tok in body:
        if tok == vocab.end:
            terminated = True
            break
        if tok == vocab.sep:
            if current:
                sentences.append(current)
            else:
                flags.append("empty-sentence")
            current = []
        elif vocab.is_content(tok):
            current.append(tok)
        else:
            flags.append("stray-special")
    if current:
        sentences.append(current)
        flags.append("unterminated")
    elif not terminated and k is not None and len(sentences) < k:
        flags.append("unterminated")

    if k is None:
        k = len(sentences)
    if len(sentences) != k:
        flags.append("count-mismatch")
        sentences = sentences[:k]
    return ParsedCaptions(k, sentences, sorted(set(flags)))
