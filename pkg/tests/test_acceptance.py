"""Acceptance criteria 1-8, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists one
PASS/FAIL line per criterion.  Criteria 5, 6 and 8 train full models and take
several minutes (``-m "not slow"`` skips them).
"""

import itertools
import math
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from test_metrics import brute_lcs, brute_monotone, disjoint_segments, optimal_match_count

from maskalign import cli, metrics
from maskalign.audit import gradient_audit, micro_setup
from maskalign.autodiff import Tensor
from maskalign.masks import (
    FAMILIES,
    MaskParams,
    build_mask,
    diversity_loss,
    frame_times,
    mask_values,
    negative_mask,
    pairwise_hinge,
)
from maskalign.pipeline import (
    TrainConfig,
    evaluate,
    infer,
    random_baseline_f1,
    summarize,
    train_captioning_stage,
    train_localizing_stage,
    variant_config,
)
from maskalign.synthcorpus import CorpusConfig, generate_corpus

SEEDS = (0, 1, 2)


# --------------------------------------------------------------------------
# shared training runs (criteria 5 and 6 reuse the seed-0 full model)
# --------------------------------------------------------------------------


class Runs:
    def __init__(self):
        self.splits = generate_corpus(CorpusConfig())
        self._captioning = {}
        self._scores = {}
        self.seconds = {}

    def captioning(self, seed):
        if seed not in self._captioning:
            self._captioning[seed] = train_captioning_stage(self.splits["train"],
                                                            TrainConfig(seed=seed))
        return self._captioning[seed]

    def scores(self, variant, seed):
        """Summary dicts for refined and unrefined inference of one variant."""
        key = (variant, seed)
        if key not in self._scores:
            start = time.perf_counter()
            cfg = variant_config(TrainConfig(seed=seed), variant)
            loc = train_localizing_stage(self.splits["train"], cfg, self.captioning(seed))
            val = self.splits["val"]
            refined = summarize(evaluate(infer(val, loc.model, cfg, refine=True), val))
            coarse = summarize(evaluate(infer(val, loc.model, cfg, refine=False), val))
            self._scores[key] = {"refined": refined, "coarse": coarse}
            self.seconds[key] = time.perf_counter() - start
        return self._scores[key]


@pytest.fixture(scope="module")
def runs():
    return Runs()


# --------------------------------------------------------------------------
# criterion 1
# --------------------------------------------------------------------------


def test_criterion_1_gradient_audit(acceptance):
    model, videos, config = micro_setup(0)
    rep = gradient_audit(model, videos, config, fraction=0.01, eps=1e-5)
    ok = rep.max_rel_error <= 1e-3 and rep.seconds <= 60 and model.vocab.size == 16
    assert acceptance(1, "gradient audit", ok,
                      f"max rel err {rep.max_rel_error:.2e} over {rep.n_checked} of "
                      f"{rep.n_parameters} params in {rep.seconds:.1f}s")


# --------------------------------------------------------------------------
# criterion 2
# --------------------------------------------------------------------------


def test_criterion_2_mask_identities(acceptance):
    rng = np.random.default_rng(2)
    times = frame_times(32)
    worst = Counter()
    for family in FAMILIES:
        for _ in range(1000):
            mu, sigma, tau = rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.5, 5)
            p = MaskParams(mu, sigma, tau, family)
            m = build_mask(p, 32)
            vals = m.values.data
            worst["range"] += int(np.any((vals < 0) | (vals > 1)))
            comp = np.max(np.abs(vals + negative_mask(m).values.data - 1.0))
            worst["complement"] = max(worst["complement"], comp)
            edges = [mu - sigma / tau, mu + sigma / tau]
            if family == "gaussian":
                err = np.max(np.abs(mask_values(p, edges).data - math.exp(-0.5)))
                worst["gaussian"] = max(worst["gaussian"], err)
            if family == "cauchy":
                err = np.max(np.abs(mask_values(p, edges).data - 0.5))
                worst["cauchy"] = max(worst["cauchy"], err)
            if family == "sigmoid":
                sharp, hard = MaskParams(mu, sigma, 1e4, "sigmoid"), MaskParams(mu, sigma, 1.0,
                                                                                "hard-binary")
                off = np.minimum(np.abs(times - (mu - sigma / 2)), np.abs(times - (mu + sigma / 2)))
                keep = off > 1e-3
                err = np.max(np.abs(mask_values(sharp, times[keep]).data
                                    - mask_values(hard, times[keep]).data), initial=0.0)
                worst["sigmoid-hard"] = max(worst["sigmoid-hard"], err)
    ok = (worst["range"] == 0 and worst["complement"] <= 1e-12 and worst["gaussian"] <= 1e-9
          and worst["cauchy"] <= 1e-9 and worst["sigmoid-hard"] <= 1e-3)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items()) if k != "range")
    assert acceptance(2, "mask identities", ok, f"{worst['range']} out of range; {detail}")


# --------------------------------------------------------------------------
# criterion 3
# --------------------------------------------------------------------------


def test_criterion_3_diversity_oracle(acceptance):
    m = build_mask(MaskParams(0.4, 0.3), 32)
    pair = diversity_loss([m, m], 0.8).item()
    sim = np.array([[1.0, 0.9, 0.5], [0.9, 1.0, 0.85], [0.5, 0.85, 1.0]])
    three = pairwise_hinge(sim, 0.8).item()
    rng = np.random.default_rng(3)
    invariance = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 6))
        masks = [Tensor(rng.uniform(0, 1, 32)) for _ in range(k)]
        gamma = float(rng.uniform(0, 1))
        base = diversity_loss(masks, gamma).item()
        perm = diversity_loss([masks[i] for i in rng.permutation(k)], gamma).item()
        scaled = diversity_loss([Tensor(rng.uniform(0.1, 10) * t.data) for t in masks],
                                gamma).item()
        invariance = max(invariance, abs(perm - base), abs(scaled - base))
    ok = pair == 1.0 - 0.8 and abs(pair - 0.2) <= 1e-15 and abs(three - 0.05) <= 1e-12 \
        and invariance <= 1e-12
    assert acceptance(3, "diversity loss oracle", ok,
                      f"pair {pair!r}, three-mask {three!r}, invariance err {invariance:.1e}")


# --------------------------------------------------------------------------
# criterion 4
# --------------------------------------------------------------------------


def tiou_oracle(a, b):
    """Exact rational tIoU from the interval-union definition."""
    (a0, a1), (b0, b1) = [tuple(Fraction(x).limit_denominator(1000) for x in s) for s in (a, b)]
    inter = max(Fraction(0), min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return float(inter / union) if union else 0.0


def bleu_oracle(cands, refs, n):
    """Clipped n-gram precision by explicit enumeration, single reference each."""
    log_p = 0.0
    for k in range(1, n + 1):
        hit = total = 0
        for c, r in zip(cands, refs):
            grams_c = [tuple(c[i:i + k]) for i in range(len(c) - k + 1)]
            grams_r = [tuple(r[i:i + k]) for i in range(len(r) - k + 1)]
            for g in set(grams_c):
                hit += min(grams_c.count(g), grams_r.count(g))
            total += len(grams_c)
        if hit == 0:
            return 0.0
        log_p += math.log(hit / total) / n
    c_len, r_len = sum(map(len, cands)), sum(map(len, refs))
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def rouge_oracle(c, r, beta=1.2):
    lcs = brute_lcs(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)


def cider_oracle(cand, ref, docs):
    """TF-IDF vectors over an explicit n-gram index, cosine per order, times 10."""
    total = 0.0
    for k in range(1, 5):
        grams = sorted({tuple(s[i:i + k]) for s in docs + [cand] for i in range(len(s) - k + 1)})
        df = np.array([sum(any(tuple(d[i:i + k]) == g for i in range(len(d) - k + 1))
                           for d in docs) for g in grams], dtype=float)
        idf = np.log(len(docs)) - np.log(np.maximum(df, 1.0))

        def vec(s):
            return np.array([sum(tuple(s[i:i + k]) == g for i in range(len(s) - k + 1))
                             for g in grams], dtype=float) * idf

        u, v = vec(cand), vec(ref)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        total += float(u @ v / (nu * nv)) if nu and nv else 0.0
    return 10.0 * total / 4


def soda_oracle(preds, gts, thresholds=metrics.THRESHOLDS):
    total = 0.0
    for thr in thresholds:
        score = [[rouge_oracle(pc, gc) if tiou_oracle(ps, gs) >= thr else 0.0
                  for gs, gc in gts] for ps, pc in preds]
        matched = brute_monotone(score)
        p, r = matched / len(preds), matched / len(gts)
        total += 2 * p * r / (p + r) if p + r else 0.0
    return total / len(thresholds)


def test_criterion_4_metric_oracles(acceptance):
    rng = np.random.default_rng(4)
    failures = Counter()
    counts = Counter()

    def words(k):
        return [int(t) for t in rng.integers(0, 6, size=k)]

    tiou_cases = [((0.2, 0.5), (0.3, 0.6)), ((0.1, 0.4), (0.1, 0.4)), ((0.0, 0.2), (0.5, 0.9))]
    while len(tiou_cases) < 25:
        a, b = sorted(rng.integers(0, 21, 2) / 20), sorted(rng.integers(0, 21, 2) / 20)
        tiou_cases.append((tuple(a), tuple(b)))
    for a, b in tiou_cases:
        counts["tiou"] += 1
        failures["tiou"] += abs(metrics.tiou(a, b) - tiou_oracle(a, b)) > 1e-12

    bleu_cases = [([[1, 2, 3]], [[1, 2, 4]]), ([[1, 2, 3, 4]], [[1, 2, 3, 4]]), ([[1, 2]], [[3, 4]])]
    while len(bleu_cases) < 25:
        k = int(rng.integers(1, 4))
        bleu_cases.append(([words(int(rng.integers(2, 7))) for _ in range(k)],
                           [words(int(rng.integers(2, 7))) for _ in range(k)]))
    for cands, refs in bleu_cases:
        for n in range(1, 5):
            counts["bleu"] += 1
            failures["bleu"] += abs(metrics.bleu_n(cands, refs, n)
                                    - bleu_oracle(cands, refs, n)) > 1e-12

    rouge_cases = [([1, 9, 2], [1, 2]), ([1, 2, 3], [1, 2, 3]), ([1, 2], [3, 4])]
    rouge_cases += [(words(int(rng.integers(1, 8))), words(int(rng.integers(1, 8))))
                    for _ in range(22)]
    for c, r in rouge_cases:
        counts["rouge"] += 1
        failures["rouge"] += abs(metrics.rouge_l(c, r) - rouge_oracle(c, r)) > 1e-12

    for _ in range(25):
        docs = [words(int(rng.integers(2, 7))) for _ in range(int(rng.integers(3, 6)))]
        i = int(rng.integers(0, len(docs)))
        cand = words(int(rng.integers(2, 7)))
        counts["cider"] += 1
        got = metrics.CiderScorer(docs).score(cand, docs[i])
        failures["cider"] += abs(got - cider_oracle(cand, docs[i], docs)) > 1e-9

    for _ in range(25):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        preds = [(s, words(3)) for s in disjoint_segments(rng, n)]
        gts = [(s, words(3)) for s in disjoint_segments(rng, m)]
        counts["soda"] += 1
        failures["soda"] += abs(metrics.soda_lite(preds, gts) - soda_oracle(preds, gts)) > 1e-12

    for _ in range(500):
        n, m = rng.integers(1, 5, size=2)
        preds, gts = disjoint_segments(rng, n), disjoint_segments(rng, m)
        counts["greedy"] += 1
        failures["greedy"] += any(len(metrics.greedy_match(preds, gts, thr))
                                  != optimal_match_count(preds, gts, thr)
                                  for thr in metrics.THRESHOLDS)

    ok = sum(failures.values()) == 0 and all(counts[k] >= 20 for k in counts)
    detail = ", ".join(f"{k} {counts[k] - failures[k]}/{counts[k]}" for k in sorted(counts))
    assert acceptance(4, "metric oracles", ok, detail)


# --------------------------------------------------------------------------
# criterion 5
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_weak_supervision_recovery(runs, acceptance):
    start = time.perf_counter()
    runs.captioning(0)
    f1 = runs.scores("full", 0)["refined"]["F1"]
    minutes = (time.perf_counter() - start) / 60
    baseline = random_baseline_f1(runs.splits["val"])
    ok = f1 >= 0.5 and f1 >= 2 * baseline and minutes <= 30
    assert acceptance(5, "weak-supervision recovery", ok,
                      f"val F1 {f1:.3f}, random baseline {baseline:.3f}, {minutes:.1f} min")


# --------------------------------------------------------------------------
# criterion 6
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_directional_ablations(runs, acceptance):
    def mean(variant, metric, view="refined"):
        return float(np.mean([runs.scores(variant, s)[view][metric] for s in SEEDS]))

    checks = {}
    for metric in ("F1", "BLEU-2"):
        checks[f"gaussian>hard {metric}"] = (mean("full", metric), mean("hard-binary", metric))
        checks[f"full>drop-positive {metric}"] = (mean("full", metric),
                                                  mean("drop-positive", metric))
    refined, coarse = mean("full", "BLEU-2"), mean("full", "BLEU-2", "coarse")
    ok = all(a > b for a, b in checks.values()) and refined >= coarse - 0.01
    detail = "; ".join(f"{k} {a:.3f} vs {b:.3f}" for k, (a, b) in checks.items())
    detail += f"; refined BLEU-2 {refined:.3f} vs coarse {coarse:.3f}"
    assert acceptance(6, "directional ablations", ok, detail)


# --------------------------------------------------------------------------
# criterion 7
# --------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path, monkeypatch, capsys, acceptance):
    monkeypatch.setenv(cli.ENV_RUN_ROOT, str(tmp_path / "runs"))
    gen = ["--n-train", "12", "--n-val", "4", "--seed", "7"]
    train = ["--caption-epochs", "2", "--localize-epochs", "2", "--seed", "3"]
    artifacts = []
    for name in ("a", "b"):
        data = str(tmp_path / f"data-{name}")
        codes = [cli.main(["gen", "--out", data, *gen]),
                 cli.main(["train", "--corpus", data, "--run", name, *train]),
                 cli.main(["infer", "--corpus", data, "--run", name])]
        capsys.readouterr()
        assert codes == [0, 0, 0]
        run_dir = tmp_path / "runs" / name
        artifacts.append({
            "corpus": (tmp_path / f"data-{name}" / "train.jsonl").read_bytes()
            + (tmp_path / f"data-{name}" / "val.jsonl").read_bytes(),
            "captioning.ckpt": (run_dir / "captioning.ckpt").read_bytes(),
            "localizing.ckpt": (run_dir / "localizing.ckpt").read_bytes(),
            "predictions": (run_dir / "predictions-val.jsonl").read_bytes(),
        })
    same = {k: artifacts[0][k] == artifacts[1][k] for k in artifacts[0]}
    assert acceptance(7, "determinism", all(same.values()),
                      ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}"
                                for k, v in same.items()))


# --------------------------------------------------------------------------
# criterion 8
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_overfit_recovery(acceptance):
    splits = generate_corpus(CorpusConfig(n_train=1, n_val=0))
    train_corpus = splits["train"]
    cfg = TrainConfig(caption_epochs=100, localize_epochs=100, batch_size=1)
    captioning = train_captioning_stage(train_corpus, cfg)
    localized = train_localizing_stage(train_corpus, cfg, captioning)
    (result,) = infer(train_corpus, localized.model, cfg)
    video = train_corpus.videos[0]
    ious = [metrics.tiou((e.start, e.end), s) for e, s in zip(result.events, video.segments)]
    captions_exact = [e.caption for e in result.events] == video.captions
    ok = len(result.events) == video.n_events and captions_exact and all(v >= 0.5 for v in ious)
    assert acceptance(8, "single-video overfit recovery", ok,
                      f"{len(result.events)}/{video.n_events} events, captions "
                      f"{'exact' if captions_exact else 'differ'}, tIoU "
                      f"{[round(v, 2) for v in ious]}, final losses "
                      f"{captioning.epoch_losses()[-1]:.4f}/{localized.epoch_losses()[-1]:.4f}")
