"""Command-line interface: ``maskalign <command> [flags]``.

Every command writes only under its run directory (``gen`` writes the corpus
directory it is given).  Failures print one JSON object on stderr and exit
with a non-zero code:

* 1 - gradient audit above tolerance
* 2 - usage error (bad flag or value, run directory exists or is locked)
* 3 - missing or unreadable input file, or stages run out of order
* 4 - non-finite loss or gradient; ``step`` names the optimizer step
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .audit import gradient_audit, micro_setup
from .errors import (
    CompatibilityError,
    ConfigError,
    CorruptionError,
    NumericError,
    StageOrderError,
    UsageError,
    VersionError,
)
from .masks import FAMILIES, MaskParams, build_mask, write_mask_csv
from .model import Model
from .synthcorpus import CorpusConfig, generate_corpus, load_corpus, write_corpus_dir

log = logging.getLogger("maskalign")

ENV_RUN_ROOT = "MASKALIGN_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"
SNAPSHOT = "config.json"
LOCK = ".lock"
LOSSES = "losses.csv"
CKPT = {pipeline.CAPTIONING: "captioning.ckpt", pipeline.LOCALIZING: "localizing.ckpt"}
LOSS_FIELDS = ("stage", "epoch", "step", "loss", "positive", "negative", "diversity",
               "grad_norm")
SWEEP_GRIDS = {"tau": (0.8, 1.2, 1.6, 2.0, 2.4, 2.8), "gamma": (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)}
# hyperparameters that only affect the localizing stage and may differ
# between a captioning run and the localizing run continuing it
LOCALIZING_ONLY = ("localize_epochs", "tau", "gamma", "mask_family", "use_positive",
                   "use_negative", "use_diversity", "refine")

EXIT_AUDIT, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 1, 2, 3, 4


class InputError(Exception):
    """A referenced file is missing or unreadable."""


# --------------------------------------------------------------------------
# run directories
# --------------------------------------------------------------------------


def run_root() -> Path:
    return Path(os.environ.get(ENV_RUN_ROOT, DEFAULT_RUN_ROOT))


def resolve_run(name: str) -> Path:
    path = Path(name)
    return path if path.is_absolute() or path.parent != Path(".") else run_root() / path


@contextmanager
def locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"run directory {run_dir} is locked by another command "
                         f"(remove {lock} if no command is running)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def write_snapshot(run_dir: Path, snapshot: dict) -> None:
    (run_dir / SNAPSHOT).write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")


def read_snapshot(run_dir: Path) -> dict:
    path = run_dir / SNAPSHOT
    if not path.exists():
        raise InputError(f"{path} not found; run `train` first")
    return json.loads(path.read_text())


def clear_run(run_dir: Path) -> None:
    for entry in run_dir.iterdir():
        if entry.name == LOCK:
            continue
        if entry.is_dir():
            shutil.rmtree(entry)
        else:
            entry.unlink()


def claim_fresh(run_dir: Path, force: bool) -> None:
    """Empty a run directory for a new snapshot, refusing unless forced."""
    existing = [p for p in run_dir.iterdir() if p.name != LOCK]
    if existing and not force:
        raise UsageError(f"run directory {run_dir} already holds a run; pass --force to replace it")
    clear_run(run_dir)


def corpus_file(corpus: str, split: str) -> Path:
    path = Path(corpus)
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise InputError(f"corpus file {path} not found")
    return path


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(args) -> dict:
    cfg = CorpusConfig(n_train=args.n_train, n_val=args.n_val, min_events=args.min_events,
                       max_events=args.max_events, n_frames=args.frames, d=args.dim,
                       noise=args.noise, n_templates=args.templates, seed=args.seed)
    out = Path(args.out)
    targets = [out / "train.jsonl", out / "val.jsonl"]
    if any(p.exists() for p in targets) and not args.force:
        raise UsageError(f"corpus files already exist in {out}; pass --force to replace them")
    digests = write_corpus_dir(generate_corpus(cfg), out)
    summary = {"generator": cfg.to_dict(), "digests": digests}
    (out / "corpus.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), "digests": digests}


def train_config_from_args(args, base: pipeline.TrainConfig | None = None) -> pipeline.TrainConfig:
    cfg = base or pipeline.TrainConfig()
    overrides = {}
    for key in ("caption_epochs", "localize_epochs", "batch_size", "lr", "tau", "gamma", "seed",
                "mask_family"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for flag, key in (("no_positive", "use_positive"), ("no_negative", "use_negative"),
                      ("no_diversity", "use_diversity")):
        if getattr(args, flag, False):
            overrides[key] = False
    try:
        return replace(cfg, **overrides)
    except ValueError as err:
        raise UsageError(str(err)) from None


def fit_to_corpus(config: pipeline.TrainConfig, corpus_path: Path) -> pipeline.TrainConfig:
    """Size the model's frame count, width and vocabulary to a corpus file."""
    from .synthcorpus import read_header
    header = read_header(corpus_path)
    vocab = header["vocabulary"]
    try:
        model = replace(config.model, n_frames=header["n_frames"], d_model=header["d"],
                        n_content=vocab["n_content"], max_events=vocab["max_events"])
    except ValueError as err:
        raise UsageError(f"corpus {corpus_path} does not fit the model: {err}") from None
    return replace(config, model=model)


def _append_losses(run_dir: Path, steps) -> None:
    path = run_dir / LOSSES
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOSS_FIELDS)
        for s in steps:
            w.writerow([s.stage, s.epoch, s.step] + [repr(float(getattr(s, f)))
                                                     for f in LOSS_FIELDS[3:]])


def _snapshot(command: str, config: pipeline.TrainConfig, corpus_path: Path) -> dict:
    from .synthcorpus import read_header
    return {"command": command, "train_config": config.to_dict(),
            "corpus": str(corpus_path), "corpus_digest": read_header(corpus_path)["digest"]}


def cmd_train(args) -> dict:
    run_dir = resolve_run(args.run)
    if args.stage == pipeline.LOCALIZING and not (run_dir / CKPT[pipeline.CAPTIONING]).exists():
        raise StageOrderError(f"localizing stage needs {run_dir / CKPT[pipeline.CAPTIONING]}; "
                              "run `train --stage captioning` first")
    path = corpus_file(args.corpus, "train")
    with locked(run_dir):
        if args.stage == pipeline.LOCALIZING:
            snap = read_snapshot(run_dir)
            base = pipeline.TrainConfig.from_dict(snap["train_config"])
            config = train_config_from_args(args, base)
            changed = [k for k in config.to_dict()
                       if config.to_dict()[k] != base.to_dict()[k] and k not in LOCALIZING_ONLY]
            if changed:
                raise UsageError(f"cannot change captioning-stage settings {changed} "
                                 "when continuing a run")
            if (run_dir / CKPT[pipeline.LOCALIZING]).exists() and not args.force:
                raise UsageError(f"{run_dir / CKPT[pipeline.LOCALIZING]} exists; "
                                 "pass --force to retrain the localizing stage")
            snap["train_config"] = config.to_dict()
        else:
            config = fit_to_corpus(train_config_from_args(args), path)
            claim_fresh(run_dir, args.force)
            snap = _snapshot("train", config, path)
        write_snapshot(run_dir, snap)
        corpus = load_corpus(path)
        out = {"run": str(run_dir)}
        first = None
        if args.stage in (pipeline.CAPTIONING, "both"):
            first = pipeline.train_captioning_stage(corpus, config)
            first.save(run_dir / CKPT[pipeline.CAPTIONING])
            _append_losses(run_dir, first.steps)
            out["captioning_loss"] = first.epoch_losses()
        if args.stage in (pipeline.LOCALIZING, "both"):
            source = first if first is not None else run_dir / CKPT[pipeline.CAPTIONING]
            second = pipeline.train_localizing_stage(corpus, config, source)
            second.save(run_dir / CKPT[pipeline.LOCALIZING])
            _append_losses(run_dir, second.steps)
            out["localizing_loss"] = second.epoch_losses()
    return out


def _load_model(run_dir: Path, checkpoint: str | None):
    path = Path(checkpoint) if checkpoint else run_dir / CKPT[pipeline.LOCALIZING]
    if not path.exists():
        if not checkpoint and (run_dir / CKPT[pipeline.CAPTIONING]).exists():
            raise StageOrderError(f"{path} not found; run `train --stage localizing` first")
        raise InputError(f"checkpoint {path} not found")
    model, meta, _ = Model.load(path)
    return model, meta


def predictions_name(split: str, refine: bool) -> str:
    return f"predictions-{split}{'' if refine else '-norefine'}.jsonl"


def cmd_infer(args) -> dict:
    run_dir = resolve_run(args.run)
    path = corpus_file(args.corpus, args.split)
    model, meta = _load_model(run_dir, args.checkpoint)
    config = pipeline.TrainConfig.from_dict(meta["train_config"])
    corpus = load_corpus(path)
    if corpus.vocab != model.vocab:
        raise CompatibilityError("checkpoint vocabulary differs from the corpus vocabulary")
    refine = not args.no_refine
    with locked(run_dir):
        results = pipeline.infer(corpus, model, config, refine=refine)
        out = run_dir / predictions_name(args.split, refine)
        out.write_bytes(pipeline.predictions_jsonl(results, model.vocab))
    flagged = sum(1 for r in results if r.flags or any(e.flags for e in r.events))
    return {"predictions": str(out), "videos": len(results), "flagged": flagged}


def cmd_eval(args) -> dict:
    run_dir = resolve_run(args.run)
    path = corpus_file(args.corpus, args.split)
    pred_path = Path(args.predictions) if args.predictions else (
        run_dir / predictions_name(args.split, not args.no_refine))
    if not pred_path.exists():
        raise InputError(f"predictions file {pred_path} not found; run `infer` first")
    corpus = load_corpus(path, with_ground_truth=True)
    results = pipeline.read_predictions(pred_path)
    report = pipeline.evaluate(results, corpus)
    summary = pipeline.summarize(report)
    summary["random-F1"] = pipeline.random_baseline_f1(corpus)
    with locked(run_dir):
        stem = pred_path.stem.replace("predictions", "scores", 1)
        doc = report.to_dict()
        doc["random_baseline_f1"] = summary["random-F1"]
        (run_dir / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        (run_dir / f"{stem}.csv").write_text(report.to_csv())
    return summary


def cmd_gradcheck(args) -> dict:
    model, videos, config = micro_setup(args.seed)
    report = gradient_audit(model, videos, config, fraction=args.fraction, eps=args.eps,
                            seed=args.seed)
    worst = report.worst
    out = {"max_rel_error": report.max_rel_error, "checked": report.n_checked,
           "parameters": report.n_parameters, "seconds": round(report.seconds, 3),
           "tolerance": args.tolerance, "passed": report.passed(args.tolerance),
           "worst": None if worst is None else f"{worst.param}[{worst.index}]"}
    if args.run:
        run_dir = resolve_run(args.run)
        with locked(run_dir):
            with open(run_dir / "gradcheck.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["param", "index", "analytic", "numeric", "rel_error"])
                for e in report.entries:
                    w.writerow([e.param, e.index, repr(e.analytic), repr(e.numeric),
                                repr(e.rel_error)])
    return out


def sweep_variants(spec: str) -> list[str]:
    key, _, values = spec.partition("=")
    if key not in SWEEP_GRIDS:
        raise UsageError(f"unknown sweep parameter {key!r}; choose tau or gamma")
    try:
        grid = [float(v) for v in values.split(",")] if values else list(SWEEP_GRIDS[key])
    except ValueError:
        raise UsageError(f"bad sweep values {values!r}") from None
    return [f"{key}={v:g}" for v in grid]


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_ablate(args) -> dict:
    run_dir = resolve_run(args.run)
    variants = sweep_variants(args.sweep) if args.sweep else args.variants.split(",")
    for v in variants:
        pipeline.variant_config(pipeline.TrainConfig(), v)
    seeds = _int_list(args.seeds)
    train_path = corpus_file(args.corpus, "train")
    eval_path = corpus_file(args.corpus, args.split)
    base = fit_to_corpus(train_config_from_args(args), train_path)
    with locked(run_dir):
        claim_fresh(run_dir, args.force)
        snap = _snapshot("ablate", base, train_path)
        snap.update({"variants": variants, "seeds": seeds, "eval_split": args.split})
        write_snapshot(run_dir, snap)
        train_corpus = load_corpus(train_path)
        eval_corpus = load_corpus(eval_path, with_ground_truth=True)
        rows = []
        for seed in seeds:
            cfg = replace(base, seed=seed)
            captioning = None
            for variant in variants:
                vcfg = pipeline.variant_config(cfg, variant)
                if captioning is None or not pipeline.shares_captioning_stage(captioning.config,
                                                                               vcfg):
                    captioning = pipeline.train_captioning_stage(train_corpus, vcfg)
                row = pipeline.ablation_run(train_corpus, eval_corpus, cfg, variant, captioning)
                row["seed"] = seed
                rows.append(row)
                log.info("ablation %s seed %d: F1 %.3f", variant, seed, row["F1"])
        columns = ["variant", "seed"] + [k for k in rows[0] if k not in ("variant", "seed")]
        with open(run_dir / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return {"rows": rows, "table": str(run_dir / "ablation.csv")}


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "maskalign"
    return plt


def _save_svg(plt, fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_masks(out_dir: Path, n_frames: int, mu: float, sigma: float, tau: float) -> list[Path]:
    masks = [build_mask(MaskParams(mu, sigma, tau, fam), n_frames) for fam in FAMILIES]
    write_mask_csv(out_dir / "masks.csv", masks)
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    times = np.arange(1, n_frames + 1) / n_frames
    for m in masks:
        ax.plot(times, m.values.data, label=m.params.family)
    ax.set_xlabel("normalized time")
    ax.set_ylabel("mask value")
    ax.set_title(f"mask families (mu={mu:g}, sigma={sigma:g}, tau={tau:g})")
    ax.legend()
    _save_svg(plt, fig, out_dir / "masks.svg")
    return [out_dir / "masks.csv", out_dir / "masks.svg"]


def plot_losses(out_dir: Path, losses_csv: Path) -> list[Path]:
    with open(losses_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    offset = 0
    for stage in (pipeline.CAPTIONING, pipeline.LOCALIZING):
        sel = [r for r in rows if r["stage"] == stage]
        if sel:
            ax.plot([offset + int(r["step"]) for r in sel], [float(r["loss"]) for r in sel],
                    label=stage)
            offset += len(sel)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.legend()
    _save_svg(plt, fig, out_dir / "losses.svg")
    return [out_dir / "losses.svg"]


def plot_sweeps(out_dir: Path, ablation_csv: Path) -> list[Path]:
    with open(ablation_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    written = []
    for key in SWEEP_GRIDS:
        sel = [r for r in rows if r["variant"].startswith(key + "=")]
        if not sel:
            continue
        xs = sorted({float(r["variant"].split("=")[1]) for r in sel})
        metrics_ = ("F1", "BLEU-2", "SODA-lite")
        means = {m: [float(np.mean([float(r[m]) for r in sel
                                    if float(r["variant"].split("=")[1]) == x])) for x in xs]
                 for m in metrics_}
        csv_path = out_dir / f"sweep-{key}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([key] + list(metrics_))
            for i, x in enumerate(xs):
                w.writerow([repr(x)] + [repr(means[m][i]) for m in metrics_])
        plt = _figure()
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for m in metrics_:
            ax.plot(xs, means[m], marker="o", label=m)
        ax.set_xlabel(key)
        ax.set_ylabel("score (mean over seeds)")
        ax.legend()
        _save_svg(plt, fig, out_dir / f"sweep-{key}.svg")
        written += [csv_path, out_dir / f"sweep-{key}.svg"]
    return written


def cmd_report(args) -> dict:
    run_dir = resolve_run(args.run)
    if not run_dir.exists():
        raise InputError(f"run directory {run_dir} not found")
    with locked(run_dir):
        out_dir = run_dir / "plots"
        out_dir.mkdir(exist_ok=True)
        written = plot_masks(out_dir, args.frames, args.mu, args.sigma, args.tau)
        if (run_dir / LOSSES).exists():
            written += plot_losses(out_dir, run_dir / LOSSES)
        if (run_dir / "ablation.csv").exists():
            written += plot_sweeps(out_dir, run_dir / "ablation.csv")
    return {"files": [str(p) for p in written]}


# --------------------------------------------------------------------------
# argument parsing and dispatch
# --------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--caption-epochs", type=int)
    p.add_argument("--localize-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--mask-family", choices=FAMILIES)
    p.add_argument("--no-positive", action="store_true")
    p.add_argument("--no-negative", action="store_true")
    p.add_argument("--no-diversity", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskalign", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="directory for train.jsonl and val.jsonl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--min-events", type=int, default=2)
    p.add_argument("--max-events", type=int, default=4)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--templates", type=int, default=CorpusConfig.n_templates)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="run the captioning and/or localizing stage")
    p.add_argument("--corpus", required=True, help="corpus directory or train.jsonl")
    p.add_argument("--run", required=True, help=f"run directory (relative names go under ${ENV_RUN_ROOT})")
    p.add_argument("--stage", choices=(pipeline.CAPTIONING, pipeline.LOCALIZING, "both"),
                   default="both")
    p.add_argument("--force", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("infer", help="caption, localize and refine a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint", help="defaults to the run's localizing checkpoint")
    p.add_argument("--no-refine", action="store_true")

    p = sub.add_parser("eval", help="score predictions against held-out ground truth")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--predictions", help="defaults to the run's predictions for --split")
    p.add_argument("--no-refine", action="store_true", help="score the unrefined predictions")

    p = sub.add_parser("gradcheck", help="finite-difference audit of the total loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--run", help="also write per-probe results to this run directory")

    p = sub.add_parser("ablate", help="train and score ablation variants or sweeps")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="val")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--variants", default="full",
                       help=f"comma-separated subset of: {', '.join(pipeline.VARIANTS)}")
    group.add_argument("--sweep", help="tau=0.8,1.2,... or gamma=...; bare key uses the default grid")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--force", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("report", help="write SVG/CSV plots for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=2.0)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "report": cmd_report}


def _fail(code: int, err: BaseException, **extra) -> int:
    doc = {"error": type(err).__name__, "exit": code, "message": str(err)}
    doc.update(extra)
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = COMMANDS[args.command](args)
    except NumericError as err:
        return _fail(EXIT_NUMERIC, err, step=err.step)
    except (InputError, FileNotFoundError, StageOrderError, CorruptionError, VersionError) as err:
        return _fail(EXIT_INPUT, err)
    except (UsageError, ConfigError, CompatibilityError) as err:
        return _fail(EXIT_USAGE, err)
    print(json.dumps(result, sort_keys=True, default=float))
    if args.command == "gradcheck" and not result["passed"]:
        return EXIT_AUDIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
