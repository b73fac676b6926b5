"""Two-stage training, three-stage inference and ablation runs.

Training never sees ground-truth segments: every entry point strips them from
the corpus before use.
"""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import OptimizerState, Tape, Tensor, adamw_step, clip_grad_norm
from .captioner import captioning_nll, encode_video, generate_captions, make_sequence
from .errors import (
    CompatibilityError,
    GenerationError,
    NumericError,
    ParseError,
    StageOrderError,
    UsageError,
)
from .localizer import localize
from .masks import FAMILIES, MaskParams, build_mask, diversity_loss, mask_to_segment, negative_mask
from .model import Model, ModelConfig
from .synthcorpus import Corpus, LabeledVideo
from .tokens import FULL, MASKED_NEGATIVE, MASKED_POSITIVE

log = logging.getLogger(__name__)

CAPTIONING = "captioning"
LOCALIZING = "localizing"


@dataclass(frozen=True)
class TrainConfig:
    caption_epochs: int = 10
    localize_epochs: int = 10
    batch_size: int = 8
    # the 1e-4 used with pretrained decoders is too small for a randomly
    # initialized desk-scale model to converge within 20 epochs
    lr: float = 3e-3
    warmup: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    tau: float = 2.0
    gamma: float = 0.8
    seed: int = 0
    mask_family: str = "gaussian"
    use_positive: bool = True
    use_negative: bool = True
    use_diversity: bool = True
    refine: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.caption_epochs < 0 or self.localize_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not self.tau > 0:
            raise ValueError("lr and tau must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.warmup <= 1.0:
            raise ValueError("warmup must lie in [0, 1]")
        if self.mask_family not in FAMILIES:
            raise ValueError(f"unknown mask family {self.mask_family!r}")

    @property
    def n_frames(self) -> int:
        return self.model.n_frames

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names and k != "model"}
        return cls(model=ModelConfig.from_dict(d.get("model", {})), **kw)


@dataclass
class StepRecord:
    stage: str
    epoch: int
    step: int
    loss: float
    positive: float = 0.0
    negative: float = 0.0
    diversity: float = 0.0
    grad_norm: float = 0.0


@dataclass
class TrainResult:
    model: Model
    optimizer: OptimizerState
    stage: str
    steps: list = field(default_factory=list)
    config: TrainConfig | None = None

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for s in self.steps:
            by_epoch.setdefault(s.epoch, []).append(s.loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def meta(self, config: TrainConfig | None = None) -> dict:
        config = config or self.config
        return {"stage": self.stage, "train_config": config.to_dict(),
                "epoch_losses": self.epoch_losses()}

    def save(self, path, config: TrainConfig | None = None) -> None:
        self.model.save(path, self.meta(config), self.optimizer)


def _training_view(corpus: Corpus) -> Corpus:
    return corpus.redacted() if corpus.has_ground_truth else corpus


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _optimizer(config: TrainConfig, total_steps: int) -> OptimizerState:
    return OptimizerState(lr=config.lr, warmup=config.warmup, total_steps=max(total_steps, 1),
                          weight_decay=config.weight_decay)


def _apply_update(trainable: dict[str, Tensor], opt: OptimizerState, clip: float,
                  step_index: int) -> float:
    grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {step_index}",
                               step_index)
    norm = clip_grad_norm(grads, clip)
    adamw_step(trainable, grads, opt)
    for p in trainable.values():
        p.grad = None
    return norm


@contextmanager
def _at_step(step_index: int):
    """Tag numeric failures raised inside one optimizer step with its index."""
    try:
        yield
    except NumericError as err:
        if err.step is None:
            err.step = step_index
        raise


def _check_finite(value: float, step_index: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at step {step_index}", step_index)


# --------------------------------------------------------------------------
# captioning stage
# --------------------------------------------------------------------------


def full_caption_loss(model: Model, videos) -> Tensor:
    """Token-averaged full-mode captioning loss over a batch of videos."""
    total, count = None, 0
    for v in videos:
        nll, n = captioning_nll(model, encode_video(model, v.frames),
                                make_sequence(model, FULL, v.captions))
        total = nll if total is None else ad.add(total, nll)
        count += n
    return ad.mul(total, 1.0 / count)


def train_captioning_stage(corpus: Corpus, config: TrainConfig,
                           model: Model | None = None,
                           on_step: Callable[[StepRecord], None] | None = None) -> TrainResult:
    """Fit encoder and decoder on full-mode sequences; the localizer is left as is."""
    corpus = _training_view(corpus)
    if model is None:
        model = Model.initialize(config.model, config.seed)
    if model.vocab != corpus.vocab:
        raise CompatibilityError("corpus vocabulary does not match the model configuration")
    trainable = {k: p for k, p in model.params.items() if not k.startswith("loc.")}
    rng = np.random.default_rng([config.seed, 1])
    per_epoch = math.ceil(len(corpus) / config.batch_size)
    opt = _optimizer(config, per_epoch * config.caption_epochs)
    result = TrainResult(model, opt, CAPTIONING, config=config)
    step = 0
    for epoch in range(config.caption_epochs):
        for idx in _batches(rng, len(corpus), config.batch_size):
            with _at_step(step):
                with Tape() as tape:
                    loss = full_caption_loss(model, [corpus.videos[i] for i in idx])
                    tape.backward(loss)
                _check_finite(loss.item(), step)
                norm = _apply_update(trainable, opt, config.clip_norm, step)
            rec = StepRecord(CAPTIONING, epoch, step, loss.item(), grad_norm=norm)
            result.steps.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        log.info("captioning epoch %d loss %.4f", epoch, result.epoch_losses()[-1])
    return result


# --------------------------------------------------------------------------
# localizing stage
# --------------------------------------------------------------------------


@dataclass
class LocalizingLoss:
    total: Tensor
    positive: float
    negative: float
    diversity: float


def localizing_loss(model: Model, videos, config: TrainConfig) -> LocalizingLoss:
    """Positive + negative masked captioning + diversity over a batch.

    Positive and negative terms are token-averaged across the whole batch;
    the diversity term is the mean over videos.
    """
    n_frames = model.config.n_frames
    pos_sum = neg_sum = None
    pos_tokens = neg_tokens = 0
    div_terms = []
    for v in videos:
        n_events = len(v.captions)
        params = localize(model, v.frames, n_events, config.tau, config.mask_family)
        masks = [build_mask(p, n_frames) for p in params]
        for i, mask in enumerate(masks):
            if config.use_positive:
                ctx = encode_video(model, v.frames, mask)
                nll, n = captioning_nll(model, ctx, make_sequence(
                    model, MASKED_POSITIVE, [v.captions[i]]))
                pos_sum = nll if pos_sum is None else ad.add(pos_sum, nll)
                pos_tokens += n
            if config.use_negative and n_events > 1:
                rest = [c for j, c in enumerate(v.captions) if j != i]
                ctx = encode_video(model, v.frames, negative_mask(mask))
                nll, n = captioning_nll(model, ctx, make_sequence(model, MASKED_NEGATIVE, rest))
                neg_sum = nll if neg_sum is None else ad.add(neg_sum, nll)
                neg_tokens += n
        if config.use_diversity:
            div_terms.append(diversity_loss(masks, config.gamma))

    parts = []
    pos = neg = div = None
    if pos_sum is not None:
        pos = ad.mul(pos_sum, 1.0 / pos_tokens)
        parts.append(pos)
    if neg_sum is not None:
        neg = ad.mul(neg_sum, 1.0 / neg_tokens)
        parts.append(neg)
    if div_terms:
        div = ad.mul(ad.sum(ad.stack_scalars(div_terms)), 1.0 / len(div_terms))
        parts.append(div)
    total = parts[0] if parts else Tensor(0.0)
    for p in parts[1:]:
        total = ad.add(total, p)
    return LocalizingLoss(total,
                          0.0 if pos is None else pos.item(),
                          0.0 if neg is None else neg.item(),
                          0.0 if div is None else div.item())


def train_localizing_stage(corpus: Corpus, config: TrainConfig, checkpoint,
                           on_step: Callable[[StepRecord], None] | None = None) -> TrainResult:
    """Jointly train encoder, decoder and localizer on the complementary masked losses.

    ``checkpoint`` is a path or a :class:`TrainResult` from the captioning
    stage (or an earlier localizing run).
    """
    corpus = _training_view(corpus)
    model = _model_from_checkpoint(checkpoint, corpus)
    trainable = dict(model.params)
    rng = np.random.default_rng([config.seed, 2])
    per_epoch = math.ceil(len(corpus) / config.batch_size)
    opt = _optimizer(config, per_epoch * config.localize_epochs)
    result = TrainResult(model, opt, LOCALIZING, config=config)
    step = 0
    for epoch in range(config.localize_epochs):
        for idx in _batches(rng, len(corpus), config.batch_size):
            with _at_step(step):
                with Tape() as tape:
                    parts = localizing_loss(model, [corpus.videos[i] for i in idx], config)
                    if parts.total.requires_grad:
                        tape.backward(parts.total)
                _check_finite(parts.total.item(), step)
                norm = _apply_update(trainable, opt, config.clip_norm, step)
            rec = StepRecord(LOCALIZING, epoch, step, parts.total.item(), parts.positive,
                             parts.negative, parts.diversity, norm)
            result.steps.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        log.info("localizing epoch %d loss %.4f", epoch, result.epoch_losses()[-1])
    return result


def _model_from_checkpoint(checkpoint, corpus: Corpus) -> Model:
    if checkpoint is None:
        raise StageOrderError("localizing stage requires a captioning-stage checkpoint")
    if isinstance(checkpoint, TrainResult):
        stage, model = checkpoint.stage, checkpoint.model.snapshot()
    else:
        model, meta, _ = Model.load(checkpoint)
        stage = meta.get("stage")
        model = model.snapshot()
    if stage not in (CAPTIONING, LOCALIZING):
        raise StageOrderError(f"checkpoint stage {stage!r} is not a captioning-stage output")
    if model.vocab != corpus.vocab:
        raise CompatibilityError("checkpoint vocabulary differs from the corpus vocabulary")
    return model


def train(corpus: Corpus, config: TrainConfig) -> tuple[TrainResult, TrainResult]:
    first = train_captioning_stage(corpus, config)
    second = train_localizing_stage(corpus, config, first)
    return first, second


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


@dataclass
class EventPrediction:
    start: float
    end: float
    caption: list
    coarse_caption: list
    mu: float
    sigma: float
    flags: list = field(default_factory=list)


@dataclass
class InferenceResult:
    video_id: str
    events: list
    coarse_captions: list
    flags: list = field(default_factory=list)

    def to_record(self, vocab) -> dict:
        return {
            "id": self.video_id,
            "flags": self.flags,
            "events": [{
                "start": e.start, "end": e.end, "mu": e.mu, "sigma": e.sigma,
                "caption": e.caption, "text": vocab.detokenize(e.caption),
                "coarse_caption": e.coarse_caption, "flags": e.flags,
            } for e in self.events],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "InferenceResult":
        events = [EventPrediction(e["start"], e["end"], e["caption"], e["coarse_caption"],
                                  e["mu"], e["sigma"], e.get("flags", [])) for e in rec["events"]]
        return cls(rec["id"], events, [e.coarse_caption for e in events], rec.get("flags", []))


def infer_video(model: Model, video, tau: float = 2.0, family: str = "gaussian",
                refine: bool = True) -> InferenceResult:
    """Caption the full video, localize each caption, then re-caption each masked segment."""
    if ad.active_tape() is not None:
        raise RuntimeError("inference must run outside a recording tape")
    frames = Tensor(video.frames)
    flags = []
    try:
        parsed = generate_captions(model, encode_video(model, frames), FULL)
        flags.extend(parsed.flags)
        coarse = parsed.captions[: model.config.max_events]
    except (GenerationError, ParseError):
        flags.append("generation-failed")
        coarse = []
    if not coarse:
        return InferenceResult(video.video_id, [], [], flags)
    params = localize(model, frames, len(coarse), tau, family)
    events = []
    for cap, p in zip(coarse, params):
        start, end = mask_to_segment(p)
        caption, eflags = list(cap), []
        if refine:
            ctx = encode_video(model, frames, build_mask(p, model.config.n_frames))
            try:
                refined = generate_captions(model, ctx, MASKED_POSITIVE, count=1)
                if refined.captions:
                    caption = list(refined.captions[0])
                else:
                    eflags.append("refine-empty")
            except (GenerationError, ParseError):
                eflags.append("refine-failed")
        events.append(EventPrediction(start, end, caption, list(cap), p.mu_value,
                                      p.sigma_value, eflags))
    return InferenceResult(video.video_id, events, [list(c) for c in coarse], flags)


def infer(corpus: Corpus, model: Model, config: TrainConfig,
          refine: bool | None = None) -> list[InferenceResult]:
    refine = config.refine if refine is None else refine
    corpus = _training_view(corpus)
    return [infer_video(model, v, config.tau, config.mask_family, refine) for v in corpus]


def predictions_jsonl(results: list[InferenceResult], vocab) -> bytes:
    return b"".join(json.dumps(r.to_record(vocab), sort_keys=True, separators=(",", ":")).encode()
                    + b"\n" for r in results)


def read_predictions(path) -> list[InferenceResult]:
    with open(path) as fh:
        return [InferenceResult.from_record(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# evaluation helpers
# --------------------------------------------------------------------------


def prediction_events(results: list[InferenceResult], coarse: bool = False) -> list[list]:
    return [[metrics.Event(metrics.Segment(e.start, e.end),
                           e.coarse_caption if coarse else e.caption) for e in r.events]
            for r in results]


def ground_truth_events(corpus: Corpus) -> list[list]:
    out = []
    for v in corpus:
        if not isinstance(v, LabeledVideo):
            raise UsageError("evaluation needs the ground-truth view of the corpus")
        out.append([metrics.Event(metrics.Segment(*s), list(c))
                    for s, c in zip(v.segments, v.captions)])
    return out


def evaluate(results: list[InferenceResult], corpus: Corpus,
             coarse: bool = False) -> metrics.ScoreReport:
    by_id = {r.video_id: r for r in results}
    ordered = [by_id.get(v.video_id, InferenceResult(v.video_id, [], [])) for v in corpus]
    return metrics.dvc_score(prediction_events(ordered, coarse), ground_truth_events(corpus))


def random_baseline_f1(corpus: Corpus, seed: int = 0, draws: int = 20) -> float:
    """Localization F1 of uniformly random proposals, one per ground-truth event."""
    rng = np.random.default_rng([seed, 99])
    gts = [list(v.segments) for v in corpus]
    scores = []
    for _ in range(draws):
        preds = [[tuple(sorted(rng.uniform(0.0, 1.0, size=2))) for _ in g] for g in gts]
        scores.append(metrics.localization_prf(preds, gts).f1)
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

VARIANTS = (
    "full", "gaussian", "hard-binary", "sigmoid", "cauchy",
    "drop-positive", "drop-negative", "drop-diversity", "drop-refinement",
    "drop-count-prompt", "drop-mode-prompt",
)


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    """Training configuration for one ablation variant (``key=value`` sweeps allowed)."""
    if "=" in variant:
        key, value = variant.split("=", 1)
        if key not in ("tau", "gamma"):
            raise UsageError(f"unknown sweep parameter {key!r}")
        return replace(config, **{key: float(value)})
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if variant == "full":
        return config
    if variant in FAMILIES:
        return replace(config, mask_family=variant)
    if variant == "drop-positive":
        return replace(config, use_positive=False)
    if variant == "drop-negative":
        return replace(config, use_negative=False)
    if variant == "drop-diversity":
        return replace(config, use_diversity=False)
    if variant == "drop-refinement":
        return replace(config, refine=False)
    if variant == "drop-count-prompt":
        return replace(config, model=replace(config.model, use_count_prompt=False))
    return replace(config, model=replace(config.model, use_mode_prompt=False))


def shares_captioning_stage(a: TrainConfig, b: TrainConfig) -> bool:
    """True when two configs produce the same captioning-stage checkpoint."""
    keys = ("caption_epochs", "batch_size", "lr", "warmup", "weight_decay", "clip_norm", "seed")
    return a.model == b.model and all(getattr(a, k) == getattr(b, k) for k in keys)


def summarize(report: metrics.ScoreReport) -> dict:
    out = {f"{m}": report.averaged[m] for m in metrics.TEXT_METRICS}
    loc = report.localization
    out.update({"R@Avg": loc.recall_avg, "P@Avg": loc.precision_avg, "F1": loc.f1,
                "SODA-lite": report.soda})
    return out


def ablation_run(train_corpus: Corpus, eval_corpus: Corpus, config: TrainConfig, variant: str,
                 captioning: TrainResult | None = None) -> dict:
    """Train and score one variant; a compatible captioning-stage result may be reused."""
    cfg = variant_config(config, variant)
    if captioning is None or not shares_captioning_stage(captioning.config, cfg):
        captioning = train_captioning_stage(train_corpus, cfg)
    localized = train_localizing_stage(train_corpus, cfg, captioning)
    results = infer(eval_corpus, localized.model, cfg)
    report = evaluate(results, eval_corpus)
    row = {"variant": variant}
    row.update(summarize(report))
    return row
