"""Command-line entry point: ``mocritic <command> ...``.

Every command writes its outputs and a ``manifest.json`` (command line,
seed, package versions) into ``--out``.  Wall-clock time goes to a separate
``timing.json`` so the remaining artifacts stay byte-identical across
re-runs with the same seed.

Exit codes: 0 success, 1 I/O failure, 2 validation error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (
    ENSEMBLE_METHODS,
    ablate,
    elo_tournament,
    ensemble_eval,
    ensemble_train,
    load_features,
    load_matches,
    sensitivity_sweep,
    win_rate_matrix,
    write_features,
    write_sweep,
)
from .autodiff import ContractViolation, NumericFault
from .critic import CriticConfig, CriticModel, TrainHyper, eval_critic, score_many, train_critic
from .diffusion import (
    DiffusionSchedule,
    FinetuneConfig,
    GeneratorConfig,
    GeneratorModel,
    MotionDataset,
    finetune,
    fit_normalizer,
    sample_scores,
    train_generator,
)
from .metrics import HIGHER_BETTER, METRICS, compute_metric, evaluate_metric, write_reports
from .motion import CANONICAL_LEN, MotionFormatError, MotionSchemaError, forward_kinematics, resample
from .nn import CheckpointError
from .preference import (
    AnnotationError,
    PreferencePair,
    consensus_stats,
    labelled_pool,
    load_pairs,
    load_pool,
    load_questions,
    load_specs,
    make_pairs,
    save_pairs,
    save_pool,
    synth_pool,
)

MANIFEST_SCHEMA = 1
VALIDATION_ERRORS = (ContractViolation, AnnotationError, MotionFormatError, MotionSchemaError, CheckpointError)
ENSEMBLE_FEATURES = ("critic", "acceleration", "jerk", "ground_contact", "pfc")


class RunError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers


def read_config(path: str | None, *types) -> list[dict]:
    """Split a flat JSON config over dataclass ``types``; unknown keys are errors."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ContractViolation(f"{path}:{err.lineno}: {err.msg}") from err
        if not isinstance(raw, dict):
            raise ContractViolation(f"{path}: config must be a JSON object")
    known = [{f.name for f in dataclasses.fields(t)} for t in types]
    unknown = sorted(set(raw) - set().union(*known))
    if unknown:
        raise ContractViolation(f"{path}: unknown config keys {unknown}")
    return [{k: v for k, v in raw.items() if k in names} for names in known]


def write_manifest(out: Path, args: argparse.Namespace, extra: dict) -> None:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": args.command,
        "argv": [str(a) for a in args.argv],
        "seed": args.seed,
        "versions": {
            "mocritic": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def prepared(clips: dict, mode: str) -> dict:
    """Bring every clip to the canonical critic length."""
    return {k: c if c.length == CANONICAL_LEN else resample(c, CANONICAL_LEN, mode) for k, c in clips.items()}


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise ContractViolation(f"bad number list {text!r}") from err


def read_pool(path: str) -> dict:
    pool = load_pool(path)
    if not pool:
        raise ContractViolation(f"{path}: no motion files found")
    return pool


def check_pairs(pairs, clips, path) -> None:
    for p in pairs:
        for name in (p.better, p.worse):
            if name not in clips:
                raise ContractViolation(f"{path}: pair names unknown motion {name!r}")


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> dict:
    specs = load_specs(args.specs)
    pool = labelled_pool(args.pool, args.seed) if args.labelled else synth_pool(args.pool, args.seed)
    pairs, perturbed = make_pairs(pool, specs, args.seed)
    save_pool({**pool, **perturbed}, args.out / "motions")
    save_pairs(pairs, args.out / "pairs.jsonl")
    return {"clean": len(pool), "perturbed": len(perturbed), "pairs": len(pairs), "specs": len(specs)}


def cmd_train_critic(args) -> dict:
    cfg, hyp = read_config(args.config, CriticConfig, TrainHyper)
    hyp.setdefault("seed", args.seed)
    config, hyper = CriticConfig(**cfg), TrainHyper(**hyp)
    pairs = load_pairs(args.pairs)
    clips = prepared(read_pool(args.motions), args.resample)
    check_pairs(pairs, clips, args.pairs)
    model, hist = train_critic(pairs, clips, config, hyper, log=None if args.quiet else print)
    model.save(args.out / "critic.mcrt")
    with open(args.out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "heldout_accuracy"])
        for i, loss in enumerate(hist.train_loss):
            acc = hist.heldout_accuracy[i] if hist.heldout_accuracy else ""
            w.writerow([i + 1, repr(loss), repr(acc)])
    return {
        "config": dataclasses.asdict(config),
        "hyper": dataclasses.asdict(hyper),
        "train_sources": len(hist.train_sources),
        "heldout_sources": len(hist.heldout_sources),
        "final_heldout_accuracy": hist.heldout_accuracy[-1] if hist.heldout_accuracy else None,
    }


def cmd_score(args) -> dict:
    model = CriticModel.load(args.model)
    clips = prepared(read_pool(args.motions), args.resample)
    names = sorted(clips)
    scores = score_many(model, [clips[n] for n in names])
    with open(args.out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["motion", "score"])
        for n, s in zip(names, scores):
            w.writerow([n, repr(float(s))])
    return {"motions": len(names)}


def cmd_eval_metrics(args) -> dict:
    pairs = load_pairs(args.pairs)
    clips = read_pool(args.motions)
    check_pairs(pairs, clips, args.pairs)
    names = sorted({n for p in pairs for n in (p.better, p.worse)})
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in wanted:
        if m != "critic" and m not in METRICS:
            raise ContractViolation(f"--metrics: unknown metric {m!r}")
    refs = read_pool(args.reference) if args.reference else {}
    positions = {n: forward_kinematics(clips[n]) for n in names}
    reports = []
    for m in wanted:
        if m == "critic":
            if args.model is None:
                raise ContractViolation("--metrics: 'critic' needs --model")
            reports.append(eval_critic(CriticModel.load(args.model), pairs, prepared(clips, args.resample)))
            continue
        spec = METRICS[m]
        scores = {}
        for n in names:
            ref = None
            if spec.needs_reference:
                key = n.split("_p")[0]
                if key not in refs:
                    raise ContractViolation(f"metric {m!r} needs a reference for {n!r} (--reference)")
                ref = refs[key]
            scores[n] = compute_metric(m, clips[n], reference=ref, positions=positions[n])
        reports.append(evaluate_metric(m, scores, spec.polarity, pairs))
    suffix = "csv" if args.format == "csv" else "json"
    write_reports(reports, args.out / f"metrics.{suffix}", args.format, extra={"seed": args.seed})
    return {"metrics": wanted, "pairs": len(pairs)}


def cmd_train_gen(args) -> dict:
    gcfg, = read_config(args.config, GeneratorConfig)
    config = GeneratorConfig(**gcfg)
    clips = prepared(read_pool(args.motions), args.resample)
    ordered = [clips[n] for n in sorted(clips)]
    mean, std = fit_normalizer(np.stack([c.frames() for c in ordered]))
    gen = GeneratorModel(config, seed=args.seed, mean=mean, std=std)
    data = MotionDataset.from_clips(gen, ordered)
    losses = train_generator(gen, data, DiffusionSchedule(config.T), args.steps, lr=args.lr,
                             seed=args.seed, log=None if args.quiet else print)
    gen.save(args.out / "gen.mgen")
    return {"steps": args.steps, "final_loss": float(np.mean(losses[-50:])) if losses else None}


def cmd_finetune(args) -> dict:
    fcfg, = read_config(args.config, FinetuneConfig)
    fcfg.setdefault("seed", args.seed)
    if "window" in fcfg and fcfg["window"] is not None:
        fcfg["window"] = tuple(fcfg["window"])
    if args.iterations is not None:
        fcfg["iterations"] = args.iterations
    config = FinetuneConfig(**fcfg)
    gen = GeneratorModel.load(args.gen)
    critic = CriticModel.load(args.critic)
    critic.freeze()
    clips = prepared(read_pool(args.motions), args.resample)
    data = MotionDataset.from_clips(gen, [clips[n] for n in sorted(clips)])
    schedule = DiffusionSchedule(gen.config.T)
    try:
        finetune(gen, critic, data, config, schedule, run_dir=args.out, checkpoint_every=args.checkpoint_every,
                 log=None if args.quiet else print)
    except NumericFault as err:
        raise RunError(f"numeric fault: {err}; state dumped to {args.out / 'fault_state.mgen'}", 3) from err
    gen.save(args.out / "gen.mgen")
    extra = {"config": json.loads(json.dumps(dataclasses.asdict(config)))}
    if args.eval_samples:
        scores = sample_scores(gen, critic, schedule, args.eval_samples, args.seed)
        extra["sample_score_mean"] = float(scores.mean())
    return extra


def cmd_elo(args) -> dict:
    matches = load_matches(args.matches)
    subsets = args.subsets.split(",") if args.subsets else None
    table = elo_tournament(matches, k=args.k, initial=args.initial, subsets=subsets)
    table.write_csv(args.out / "elo.csv")
    names, rate = win_rate_matrix(matches, subsets)
    with open(args.out / "win_rate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", *names])
        for n, row in zip(names, rate):
            w.writerow([n, *(repr(float(v)) for v in row)])
    return {"matches": len(matches), "k": args.k}


def cmd_sensitivity(args) -> dict:
    model = CriticModel.load(args.model)
    pool = prepared(read_pool(args.pool), args.resample)
    seeds = [int(s) for s in parse_floats(args.seeds)] if args.seeds else [args.seed]
    rows = sensitivity_sweep(lambda clips: score_many(model, clips), pool, parse_floats(args.scales),
                             seeds=seeds, kind=args.kind)
    write_sweep(rows, args.out / "sweep.csv")
    return {"seeds": seeds, "kind": args.kind, "clips": len(pool)}


def cmd_features(args) -> dict:
    pairs = load_pairs(args.pairs)
    clips = read_pool(args.motions)
    check_pairs(pairs, clips, args.pairs)
    names = sorted({n for p in pairs for n in (p.better, p.worse)})
    critic = CriticModel.load(args.model)
    crit = score_many(critic, [prepared({n: clips[n]}, args.resample)[n] for n in names])
    table = {}
    for n, c in zip(names, crit):
        pos = forward_kinematics(clips[n])
        row = [float(c)] + [compute_metric(m, clips[n], positions=pos) for m in ENSEMBLE_FEATURES[1:]]
        table[n] = np.array(row)
    write_features(ENSEMBLE_FEATURES, table, args.out / "features.csv")
    return {"motions": len(names)}


def cmd_ensemble(args) -> dict:
    names, table = load_features(args.features)
    pairs = load_pairs(args.pairs)
    test = load_pairs(args.test_pairs) if args.test_pairs else pairs
    for p in list(pairs) + list(test):
        for n in (p.better, p.worse):
            if n not in table:
                raise ContractViolation(f"{args.features}: no features for motion {n!r}")
    # higher-is-better orientation is learned, so raw metric values go in unchanged
    model = ensemble_train(names, table, pairs, args.method, seed=args.seed)
    report = {
        "method": args.method,
        "features": model.features,
        "coefficients": model.coefficients(),
        "train_accuracy": ensemble_eval(model, names, table, pairs).accuracy,
        "test_accuracy": ensemble_eval(model, names, table, test).accuracy,
        "single_feature_accuracy": {
            f: evaluate_metric(f, {k: float(v[i]) for k, v in table.items()}, HIGHER_BETTER, test).accuracy
            for i, f in enumerate(names)
        },
    }
    if args.ablate:
        order = args.order.split(",") if args.order else list(names)
        report["ablation"] = ablate(names, table, pairs, test, args.method, order=order, seed=args.seed).to_json()
    (args.out / "ensemble.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return {"method": args.method, "train_pairs": len(pairs), "test_pairs": len(test)}


def cmd_consensus(args) -> dict:
    stats = consensus_stats(load_questions(args.annotations))
    (args.out / "consensus.json").write_text(json.dumps(stats.to_json(), indent=2, sort_keys=True) + "\n")
    return {"questions": stats.n_questions, "annotators": len(stats.annotators)}


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mocritic", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--quiet", action="store_true")
        return p

    def resample_opt(p):
        p.add_argument("--resample", default="interpolate", choices=["truncate", "uniform_extract", "interpolate"])

    p = command("gen-data", cmd_gen_data, "synthesize a clean pool and perturbed preference pairs")
    p.add_argument("--pool", type=int, required=True)
    p.add_argument("--specs", required=True, help="JSON-lines perturbation specs")
    p.add_argument("--labelled", action="store_true", help="cycle clips through the four toy action styles")

    p = command("train-critic", cmd_train_critic, "fit a critic on preference pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--motions", required=True)
    p.add_argument("--config", help="JSON with CriticConfig/TrainHyper fields")
    resample_opt(p)

    p = command("score", cmd_score, "score every motion in a directory")
    p.add_argument("--model", required=True)
    p.add_argument("--motions", required=True)
    resample_opt(p)

    p = command("eval-metrics", cmd_eval_metrics, "pairwise accuracy and log loss of metrics")
    p.add_argument("--pairs", required=True)
    p.add_argument("--motions", required=True)
    p.add_argument("--metrics", required=True, help="comma list; 'critic' needs --model")
    p.add_argument("--model")
    p.add_argument("--reference", help="directory of reference clips for reference-based metrics")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    resample_opt(p)

    p = command("train-gen", cmd_train_gen, "pretrain the toy diffusion generator")
    p.add_argument("--motions", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--config", help="JSON with GeneratorConfig fields")
    resample_opt(p)

    p = command("finetune", cmd_finetune, "critic-guided fine-tuning of a generator")
    p.add_argument("--gen", required=True)
    p.add_argument("--critic", required=True)
    p.add_argument("--motions", required=True, help="ground-truth clips for the denoising loss")
    p.add_argument("--config", help="JSON with FinetuneConfig fields")
    p.add_argument("--iterations", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--eval-samples", type=int, default=0, help="score this many fresh samples afterwards")
    resample_opt(p)

    p = command("elo", cmd_elo, "Elo ratings and win rates from a match log")
    p.add_argument("--matches", required=True, help="CSV (a,b,outcome) or JSON-lines")
    p.add_argument("--subsets", help="comma list of expected subset names")
    p.add_argument("--k", type=float, default=32.0)
    p.add_argument("--initial", type=float, default=1500.0)

    p = command("sensitivity", cmd_sensitivity, "critic accuracy against noise scale")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--scales", required=True, help="ascending comma list")
    p.add_argument("--seeds", help="comma list; defaults to --seed")
    p.add_argument("--kind", default="gaussian_jitter")
    resample_opt(p)

    p = command("features", cmd_features, "per-motion ensemble features (critic plus heuristics)")
    p.add_argument("--pairs", required=True)
    p.add_argument("--motions", required=True)
    p.add_argument("--model", required=True)
    resample_opt(p)

    p = command("ensemble", cmd_ensemble, "fit a metric ensemble")
    p.add_argument("--features", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--test-pairs")
    p.add_argument("--method", choices=ENSEMBLE_METHODS, default="logistic")
    p.add_argument("--ablate", action="store_true")
    p.add_argument("--order", help="comma list of features for nested ablation")

    p = command("consensus", cmd_consensus, "annotator agreement statistics")
    p.add_argument("--annotations", required=True)
    return parser


@contextlib.contextmanager
def thread_cap():
    value = os.environ.get("MC_THREADS")
    if not value:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(value)):
        yield


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    start = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        with thread_cap():
            extra = args.fn(args)
        write_manifest(args.out, args, extra)
        (args.out / "timing.json").write_text(json.dumps({"wall_seconds": time.perf_counter() - start}) + "\n")
    except RunError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericFault as err:
        print(f"error: numeric fault: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
