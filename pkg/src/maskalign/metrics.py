"""Evaluation: temporal IoU matching, localization P/R/F1, caption metrics.

Caption metrics operate on token-id lists.  ``dvc_score`` follows the dense
captioning protocol: at each tIoU threshold predictions are matched one-to-one
to ground-truth events, text metrics are computed over matched pairs, and an
unmatched prediction scores 0.  METEOR is not provided; SODA-lite scores pairs
with ROUGE-L instead.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
ROUGE_BETA = 1.2
CIDER_SCALE = 10.0
CIDER_MAX_N = 4


class MetricWarning(UserWarning):
    pass


class Segment(NamedTuple):
    start: float
    end: float


class Event(NamedTuple):
    segment: Segment
    caption: list


def as_segment(s) -> Segment:
    seg = Segment(float(s[0]), float(s[1]))
    if seg.start > seg.end:
        raise ValueError(f"segment start {seg.start} after end {seg.end}")
    return seg


# --------------------------------------------------------------------------
# temporal matching
# --------------------------------------------------------------------------


def tiou(a, b) -> float:
    a, b = as_segment(a), as_segment(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def greedy_match(preds: Sequence, gts: Sequence, threshold: float) -> list[tuple[int, int]]:
    """One-to-one matching taking pairs in descending tIoU order.

    Only pairs with tIoU >= ``threshold`` are eligible; ties are broken by
    prediction index, then ground-truth index.
    """
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            v = tiou(p, g)
            if v >= threshold:
                pairs.append((-v, i, j))
    pairs.sort()
    used_p, used_g, out = set(), set(), []
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            out.append((i, j))
    return out


@dataclass
class LocalizationReport:
    thresholds: list
    recall: list
    precision: list
    recall_avg: float
    precision_avg: float
    f1: float
    flags: list = field(default_factory=list)


def _harmonic(a: float, b: float) -> float:
    return 2 * a * b / (a + b) if a + b > 0 else 0.0


def localization_prf(preds: Sequence[Sequence], gts: Sequence[Sequence],
                     thresholds: Sequence[float] = THRESHOLDS) -> LocalizationReport:
    """Per-video recall/precision at each threshold, averaged over videos.

    ``preds`` and ``gts`` hold one list of segments per video.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same videos")
    flags = []
    recall, precision = [], []
    for thr in thresholds:
        r_sum = p_sum = 0.0
        for vp, vg in zip(preds, gts):
            m = len(greedy_match(vp, vg, thr))
            r_sum += m / len(vg) if vg else 1.0
            if vp:
                p_sum += m / len(vp)
            elif "empty-prediction" not in flags:
                flags.append("empty-prediction")
        n = max(len(preds), 1)
        recall.append(r_sum / n)
        precision.append(p_sum / n)
    r_avg = sum(recall) / len(recall)
    p_avg = sum(precision) / len(precision)
    return LocalizationReport(list(thresholds), recall, precision, r_avg, p_avg,
                              _harmonic(r_avg, p_avg), flags)


# --------------------------------------------------------------------------
# caption metrics
# --------------------------------------------------------------------------


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _ref_list(refs) -> list:
    if len(refs) and isinstance(refs[0], (list, tuple)):
        return [list(r) for r in refs]
    return [list(refs)] if len(refs) else []


def bleu_n(candidates: Sequence[Sequence], references: Sequence, n: int = 4) -> float:
    """Corpus-level BLEU with uniform weights over orders 1..n and brevity penalty.

    ``references[i]`` is either one token list or a list of token lists.  A
    candidate with an empty reference list contributes its n-grams to the
    denominator only.
    """
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    matches = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        refs = _ref_list(refs)
        cand = list(cand)
        cand_len += len(cand)
        if refs:
            ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            cg = ngrams(cand, k)
            totals[k - 1] += sum(cg.values())
            if refs:
                best = Counter()
                for r in refs:
                    best |= ngrams(r, k)
                matches[k - 1] += sum(min(c, best[g]) for g, c in cg.items())
    if cand_len == 0:
        warnings.warn("empty candidate set in BLEU", MetricWarning, stacklevel=2)
        return 0.0
    if any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = ROUGE_BETA) -> float:
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


class CiderScorer:
    """TF-IDF n-gram cosine similarity (CIDEr) with document frequencies
    taken from a reference corpus.  Each document is one item's reference set.
    """

    def __init__(self, documents: Sequence[Sequence], max_n: int = CIDER_MAX_N):
        self.max_n = max_n
        self.n_docs = len(documents)
        if self.n_docs <= 1:
            warnings.warn("CIDEr document frequencies from <= 1 document are degenerate",
                          MetricWarning, stacklevel=2)
        self.df = [Counter() for _ in range(max_n)]
        for doc in documents:
            refs = _ref_list(doc)
            for k in range(max_n):
                seen = set()
                for r in refs:
                    seen.update(ngrams(r, k + 1))
                self.df[k].update(seen)
        self.log_n = math.log(max(float(self.n_docs), 1.0))

    def _vector(self, tokens, k: int) -> dict:
        return {g: c * (self.log_n - math.log(max(1.0, self.df[k][g])))
                for g, c in ngrams(tokens, k + 1).items()}

    @staticmethod
    def _cosine(u: dict, v: dict) -> float:
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)

    def score(self, candidate, refs) -> float:
        refs = _ref_list(refs)
        if not refs or not candidate:
            return 0.0
        total = 0.0
        for k in range(self.max_n):
            cv = self._vector(candidate, k)
            total += sum(self._cosine(cv, self._vector(r, k)) for r in refs) / len(refs)
        return CIDER_SCALE * total / self.max_n


def cider(candidates: Sequence, references: Sequence, corpus: Sequence | None = None) -> float:
    """Mean CIDEr over candidates; ``corpus`` defaults to ``references``."""
    scorer = CiderScorer(references if corpus is None else corpus)
    if not candidates:
        return 0.0
    return sum(scorer.score(c, r) for c, r in zip(candidates, references)) / len(candidates)


# --------------------------------------------------------------------------
# dense captioning score
# --------------------------------------------------------------------------

TEXT_METRICS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr")


def _events(video) -> list[Event]:
    out = []
    for e in video:
        seg, cap = (e.segment, e.caption) if isinstance(e, Event) else (e[0], e[1])
        out.append(Event(as_segment(seg), list(cap)))
    return out


def match_pairs(pred_videos, gt_videos, threshold: float):
    """(candidate, reference-list) per prediction; unmatched get an empty list."""
    pairs = []
    for vp, vg in zip(pred_videos, gt_videos):
        vp, vg = _events(vp), _events(vg)
        matched = dict(greedy_match([e.segment for e in vp], [e.segment for e in vg], threshold))
        for i, e in enumerate(vp):
            j = matched.get(i)
            pairs.append((e.caption, [] if j is None else [vg[j].caption]))
    return pairs


def caption_scores(pairs, scorer: CiderScorer) -> dict[str, float]:
    if not pairs:
        return {m: 0.0 for m in TEXT_METRICS}
    cands = [c for c, _ in pairs]
    refs = [r for _, r in pairs]
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        for n in range(1, 5):
            out[f"BLEU-{n}"] = bleu_n(cands, refs, n)
    out["ROUGE-L"] = sum(rouge_l(c, r[0]) if r else 0.0 for c, r in pairs) / len(pairs)
    out["CIDEr"] = sum(scorer.score(c, r) for c, r in pairs) / len(pairs)
    return out


@dataclass
class ScoreReport:
    thresholds: list
    per_threshold: dict
    averaged: dict
    localization: LocalizationReport
    soda: float
    n_videos: int = 0
    notes: list = field(default_factory=lambda: ["METEOR omitted; SODA-lite pairs are scored with ROUGE-L"])

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "per_threshold": self.per_threshold,
            "averaged": self.averaged,
            "localization": asdict(self.localization),
            "soda_lite": self.soda,
            "n_videos": self.n_videos,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric"] + [f"tiou@{t}" for t in self.thresholds] + ["average"])
        for name in self.per_threshold:
            w.writerow([name] + [repr(v) for v in self.per_threshold[name]]
                       + [repr(self.averaged[name])])
        loc = self.localization
        w.writerow(["Recall"] + [repr(v) for v in loc.recall] + [repr(loc.recall_avg)])
        w.writerow(["Precision"] + [repr(v) for v in loc.precision] + [repr(loc.precision_avg)])
        blank = [""] * len(self.thresholds)
        w.writerow(["F1"] + blank + [repr(loc.f1)])
        w.writerow(["SODA-lite"] + blank + [repr(self.soda)])
        return buf.getvalue()


def dvc_score(pred_videos: Sequence, gt_videos: Sequence,
              thresholds: Sequence[float] = THRESHOLDS,
              reference_corpus: Sequence | None = None) -> ScoreReport:
    """Caption metrics averaged over tIoU thresholds, plus localization and SODA-lite.

    Each video is a list of ``Event`` (or ``(segment, caption)``) entries.
    Document frequencies for CIDEr come from the ground-truth captions unless
    ``reference_corpus`` is given.
    """
    if len(pred_videos) != len(gt_videos):
        raise ValueError("prediction and ground-truth video lists differ in length")
    if reference_corpus is None:
        reference_corpus = [[e.caption for e in _events(v)] for v in gt_videos]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MetricWarning)
        scorer = CiderScorer(reference_corpus)
    per = {m: [] for m in TEXT_METRICS}
    for thr in thresholds:
        scores = caption_scores(match_pairs(pred_videos, gt_videos, thr), scorer)
        for m in TEXT_METRICS:
            per[m].append(scores[m])
    averaged = {m: sum(v) / len(v) for m, v in per.items()}
    loc = localization_prf([[e.segment for e in _events(v)] for v in pred_videos],
                           [[e.segment for e in _events(v)] for v in gt_videos], thresholds)
    soda = corpus_soda_lite(pred_videos, gt_videos, thresholds)
    return ScoreReport(list(thresholds), per, averaged, loc, soda, len(gt_videos))


# --------------------------------------------------------------------------
# SODA-lite
# --------------------------------------------------------------------------


def monotone_match_score(score: Sequence[Sequence[float]]) -> float:
    """Best total score of an order-preserving partial matching (DP)."""
    n = len(score)
    m = len(score[0]) if n else 0
    best = [[0.0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best[i][j] = max(best[i - 1][j], best[i][j - 1],
                             best[i - 1][j - 1] + score[i - 1][j - 1])
    return best[n][m]


def soda_lite(preds: Sequence, gts: Sequence, thresholds: Sequence[float] = THRESHOLDS) -> float:
    """Story-order F-measure for one video, averaged over tIoU gates."""
    preds = sorted(_events(preds), key=lambda e: (e.segment.start, e.segment.end))
    gts = sorted(_events(gts), key=lambda e: (e.segment.start, e.segment.end))
    if not preds or not gts:
        return 0.0
    caption_sim = [[rouge_l(p.caption, g.caption) for g in gts] for p in preds]
    overlap = [[tiou(p.segment, g.segment) for g in gts] for p in preds]
    total = 0.0
    for thr in thresholds:
        gated = [[s if o >= thr else 0.0 for s, o in zip(srow, orow)]
                 for srow, orow in zip(caption_sim, overlap)]
        matched = monotone_match_score(gated)
        total += _harmonic(matched / len(preds), matched / len(gts))
    return total / len(thresholds)


def corpus_soda_lite(pred_videos, gt_videos, thresholds=THRESHOLDS) -> float:
    if not gt_videos:
        return 0.0
    return sum(soda_lite(p, g, thresholds) for p, g in zip(pred_videos, gt_videos)) / len(gt_videos)
