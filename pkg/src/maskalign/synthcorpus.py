"""Deterministic synthetic videos with weak (caption-only) supervision.

Each video is a sequence of frame feature vectors.  Frames inside an event
equal that event type's unit-norm signature plus Gaussian noise; all other
frames carry a shared background vector plus noise.  Every event type has a
fixed caption, and a video's captions are listed in temporal order.

Ground-truth segments are written to the corpus file but only surface through
:class:`LabeledVideo`, which the loader returns solely when explicitly asked
for the evaluation view.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, VersionError
from .tokens import Vocabulary

FORMAT = "maskalign-corpus"
VERSION = 1
MAX_SIGNATURE_COSINE = 0.3
_SPLIT_CODES = {"train": 1, "val": 2}


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 200
    n_val: int = 50
    min_events: int = 2
    max_events: int = 4
    n_frames: int = 32
    d: int = 64
    noise: float = 0.05
    min_gap: float = 0.05
    min_length: float = 0.1
    # total background share of the timeline is drawn from this range
    # (raised to the minimum the gaps require)
    background: tuple[float, float] = (0.05, 0.25)
    n_templates: int = 16
    caption_length: tuple[int, int] = (3, 8)
    n_content: int = 64
    capacity: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.min_events <= self.max_events:
            raise ConfigError("need 1 <= min_events <= max_events")
        if self.max_events > self.capacity:
            raise ConfigError(f"max_events {self.max_events} exceeds capacity {self.capacity}")
        if self.n_templates < self.max_events:
            raise ConfigError("fewer templates than events per video")
        if self.n_frames < 2 or self.d < 2:
            raise ConfigError("n_frames and d must be >= 2")
        if self.noise < 0 or self.min_gap < 0 or self.min_length <= 0:
            raise ConfigError("noise/min_gap must be >= 0 and min_length > 0")
        lo, hi = self.background
        if not 0 <= lo <= hi < 1:
            raise ConfigError("background range must satisfy 0 <= lo <= hi < 1")
        n = self.max_events
        if n * self.min_length + max(lo, (n - 1) * self.min_gap) > 1.0:
            raise ConfigError(f"{n} events of length >= {self.min_length} with gaps >= "
                              f"{self.min_gap} do not fit in one video")
        a, b = self.caption_length
        if not 1 <= a <= b:
            raise ConfigError("caption_length must satisfy 1 <= min <= max")
        n_possible = sum(self.n_content ** k for k in range(a, min(b, 4) + 1))
        if n_possible < self.n_templates:
            raise ConfigError("not enough distinct captions for the template bank")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["caption_length"] = list(self.caption_length)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for key in ("background", "caption_length"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class EventTemplate:
    signature: np.ndarray
    caption: list[int]


@dataclass
class Video:
    video_id: str
    frames: np.ndarray
    captions: list[list[int]]

    @property
    def n_events(self) -> int:
        return len(self.captions)


@dataclass
class LabeledVideo(Video):
    segments: list[tuple[float, float]] = field(default_factory=list)

    def redacted(self) -> Video:
        return Video(self.video_id, self.frames, [list(c) for c in self.captions])


@dataclass
class Corpus:
    videos: list
    vocab: Vocabulary
    split: str = "train"
    n_frames: int = 32
    d: int = 64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    @property
    def has_ground_truth(self) -> bool:
        return any(isinstance(v, LabeledVideo) for v in self.videos)

    def redacted(self) -> "Corpus":
        vids = [v.redacted() if isinstance(v, LabeledVideo) else v for v in self.videos]
        return Corpus(vids, self.vocab, self.split, self.n_frames, self.d, dict(self.meta))

    def subset(self, n: int) -> "Corpus":
        return Corpus(self.videos[:n], self.vocab, self.split, self.n_frames, self.d,
                      dict(self.meta))

    def digest(self) -> str:
        return hashlib.sha256(b"\n".join(_record_line(v) for v in self.videos)).hexdigest()


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def make_templates(config: CorpusConfig) -> tuple[list[EventTemplate], np.ndarray]:
    """Template bank and background vector, all pairwise cosines <= 0.3."""
    rng = np.random.default_rng([config.seed, 0])
    vectors: list[np.ndarray] = []
    attempts = 0
    while len(vectors) < config.n_templates + 1:
        attempts += 1
        if attempts > 100_000:
            raise ConfigError("could not draw well-separated signatures; increase d")
        v = rng.normal(size=config.d)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ u)) <= MAX_SIGNATURE_COSINE for u in vectors):
            vectors.append(v)
    background = vectors.pop()
    captions: list[list[int]] = []
    seen = set()
    lo, hi = config.caption_length
    while len(captions) < config.n_templates:
        length = int(rng.integers(lo, hi + 1))
        cap = [int(t) for t in rng.integers(0, config.n_content, size=length)]
        if tuple(cap) not in seen:
            seen.add(tuple(cap))
            captions.append(cap)
    return [EventTemplate(s, c) for s, c in zip(vectors, captions)], background


def sample_segments(rng: np.random.Generator, n: int, config: CorpusConfig) -> list[tuple[float, float]]:
    lo, hi = config.background
    min_bg = (n - 1) * config.min_gap
    background = max(float(rng.uniform(lo, hi)), min_bg)
    background = min(background, 1.0 - n * config.min_length)
    spare_events = 1.0 - background - n * config.min_length
    lengths = config.min_length + spare_events * rng.dirichlet(np.ones(n))
    gaps = np.zeros(n + 1)
    gaps[1:n] = config.min_gap
    gaps += (background - min_bg) * rng.dirichlet(np.ones(n + 1))
    segments = []
    t = gaps[0]
    for i in range(n):
        # accumulated rounding can overshoot 1 by an ulp
        segments.append((float(t), min(float(t + lengths[i]), 1.0)))
        t += lengths[i] + gaps[i + 1]
    return segments


def synthesize_video(rng: np.random.Generator, video_id: str, config: CorpusConfig,
                     templates: list[EventTemplate], background: np.ndarray) -> LabeledVideo:
    n = int(rng.integers(config.min_events, config.max_events + 1))
    chosen = rng.choice(len(templates), size=n, replace=False)
    segments = sample_segments(rng, n, config)
    times = np.arange(1, config.n_frames + 1) / config.n_frames
    clean = np.tile(background, (config.n_frames, 1))
    for k, (s, e) in zip(chosen, segments):
        clean[(times >= s) & (times <= e)] = templates[k].signature
    frames = clean + config.noise * rng.normal(size=clean.shape)
    captions = [list(templates[k].caption) for k in chosen]
    return LabeledVideo(video_id, frames, captions, segments)


def generate_corpus(config: CorpusConfig = CorpusConfig()) -> dict[str, Corpus]:
    """Train and validation splits, deterministic in ``config.seed``."""
    config.validate()
    templates, background = make_templates(config)
    vocab = Vocabulary(config.n_content, config.capacity)
    out = {}
    for split, count in (("train", config.n_train), ("val", config.n_val)):
        videos = [synthesize_video(np.random.default_rng([config.seed, _SPLIT_CODES[split], i]),
                                   f"{split}-{i:05d}", config, templates, background)
                  for i in range(count)]
        out[split] = Corpus(videos, vocab, split, config.n_frames, config.d,
                            {"generator": config.to_dict()})
    return out


def nearest_signature_accuracy(corpus: Corpus, config: CorpusConfig) -> float:
    """Fraction of in-event frames whose nearest template signature is the true one."""
    templates, background = make_templates(config)
    bank = np.stack([t.signature for t in templates] + [background])
    by_caption = {tuple(t.caption): i for i, t in enumerate(templates)}
    times = np.arange(1, corpus.n_frames + 1) / corpus.n_frames
    hits = total = 0
    for v in corpus:
        pred = np.argmin(((v.frames[:, None, :] - bank[None]) ** 2).sum(-1), axis=1)
        for cap, (s, e) in zip(v.captions, v.segments):
            inside = (times >= s) & (times <= e)
            hits += int((pred[inside] == by_caption[tuple(cap)]).sum())
            total += int(inside.sum())
    return hits / max(total, 1)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def _record_line(v) -> bytes:
    rec = {
        "id": v.video_id,
        "features": [float(x) for x in v.frames.reshape(-1)],
        "captions": [[int(t) for t in c] for c in v.captions],
        "segments": [[float(s), float(e)] for s, e in getattr(v, "segments", [])],
    }
    return json.dumps(rec, separators=(",", ":"), allow_nan=False).encode()


def save_corpus(corpus: Corpus, path) -> None:
    if not corpus.has_ground_truth and len(corpus):
        raise ConfigError("refusing to save a redacted corpus (ground truth would be lost)")
    lines = [_record_line(v) for v in corpus.videos]
    header = {
        "format": FORMAT,
        "version": VERSION,
        "split": corpus.split,
        "d": corpus.d,
        "n_frames": corpus.n_frames,
        "n_records": len(lines),
        "vocabulary": corpus.vocab.to_dict(),
        "meta": corpus.meta,
        "digest": hashlib.sha256(b"\n".join(lines)).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    blob += b"".join(line + b"\n" for line in lines)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except ValueError:
        raise CorruptionError(f"{path}: unreadable header") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CorruptionError(f"{path}: not a corpus file")
    if header.get("version") != VERSION:
        raise VersionError(f"{path}: corpus version {header.get('version')}, expected {VERSION}")
    return header


def load_corpus(path, with_ground_truth: bool = False) -> Corpus:
    """Read and verify a corpus file.

    The default (training) view strips ground-truth segments; pass
    ``with_ground_truth=True`` only from evaluation code.
    """
    blob = Path(path).read_bytes()
    first, _, rest = blob.partition(b"\n")
    header = read_header(path)
    lines = rest.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if len(lines) != header["n_records"] or (lines and not rest.endswith(b"\n")):
        raise CorruptionError(f"{path}: expected {header['n_records']} records, found {len(lines)}")
    if hashlib.sha256(b"\n".join(lines)).hexdigest() != header["digest"]:
        raise CorruptionError(f"{path}: content digest mismatch")
    vocab = Vocabulary.from_dict(header["vocabulary"])
    n_frames, d = header["n_frames"], header["d"]
    videos = []
    for line in lines:
        rec = json.loads(line)
        frames = np.array(rec["features"], dtype=np.float64).reshape(n_frames, d)
        caps = [list(c) for c in rec["captions"]]
        if with_ground_truth:
            videos.append(LabeledVideo(rec["id"], frames, caps,
                                       [tuple(s) for s in rec["segments"]]))
        else:
            videos.append(Video(rec["id"], frames, caps))
    return Corpus(videos, vocab, header["split"], n_frames, d, header.get("meta", {}))


def write_corpus_dir(splits: dict[str, Corpus], directory) -> dict[str, str]:
    """Write ``<split>.jsonl`` files; returns the content digest of each."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, corpus in splits.items():
        save_corpus(corpus, directory / f"{name}.jsonl")
        digests[name] = read_header(directory / f"{name}.jsonl")["digest"]
    return digests
