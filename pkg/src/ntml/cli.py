"""Command-line front end.

Every subcommand works on one run directory (``--out``)::

    config.json              experiment config, written by gen-data
    data/<split>/*.idx       train, val, clean, test, poisoned_test
    checkpoints/<stage>.ckpt tt, nt, ml-teacher, ml-student, ft
    reports/<stage>.json     MetricsReport documents
    sweep_trials.csv         alpha/beta sweep table

Exit status: 0 on success, 1 on usage or config errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from pathlib import Path

from . import harness
from .errors import ConfigError, NTMLError, UsageError
from .losses import der
from .model import load_checkpoint, save_checkpoint
from .pipeline import (build_soft_dataset, evaluate, export_penultimate_features, fine_tune,
                       mutual_learning, train_nt, train_tt)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
STAGE_FILES = ("tt", "nt", "ml-teacher", "ml-student", "ft")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad arguments; this project reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _config(args) -> harness.ExperimentConfig:
    """--config, else ``<out>/config.json`` if present, else defaults; then flag overrides."""
    out = Path(args.out)
    if args.config:
        cfg = harness.ExperimentConfig.load(args.config)
    elif (out / "config.json").exists():
        cfg = harness.ExperimentConfig.load(out / "config.json")
    else:
        cfg = harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.output_dir = str(out)
    cfg.validate()
    return cfg


def _ckpt(args, cfg, name: str):
    path = Path(args.out) / "checkpoints" / f"{name}.ckpt"
    if not path.exists():
        raise UsageError(f"{path} missing; run the stage that produces it first")
    return load_checkpoint(path, cfg.arch)


def _save(args, model, name: str) -> Path:
    path = Path(args.out) / "checkpoints" / f"{name}.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
    print(f"wrote {path}")
    return path


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    harness.save_splits(harness.generate_data(cfg), out / "data")
    print(f"wrote benign splits to {out / 'data'}")


def cmd_poison(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    splits = harness.poison_data(cfg, harness.load_splits(out / "data"))
    harness.save_splits(splits, out / "data")
    cfg.save(out / "config.json")
    print(f"poisoned {int(splits.train.poisoned.sum())} of {len(splits.train)} training samples")


def cmd_train_tt(args) -> None:
    cfg = _config(args)
    splits = harness.load_splits(Path(args.out) / "data")
    _save(args, train_tt(cfg.arch, splits.train, splits.val, cfg.stage("tt")), "tt")


def cmd_train_nt(args) -> None:
    cfg = _config(args)
    splits = harness.load_splits(Path(args.out) / "data")
    d2 = build_soft_dataset(_ckpt(args, cfg, "tt"), splits.train)
    _save(args, train_nt(cfg.arch, d2, cfg.stage("nt")), "nt")


def cmd_defend_ml(args) -> None:
    cfg = _config(args)
    df = cfg.defense
    alpha = df.alpha if args.alpha is None else args.alpha
    beta = df.beta if args.beta is None else args.beta
    splits = harness.load_splits(Path(args.out) / "data")
    teacher, student = mutual_learning(
        _ckpt(args, cfg, "tt"), _ckpt(args, cfg, "nt"), splits.clean, alpha, beta,
        df.temperature, cfg.stage("ml"), structure=args.structure or df.structure,
        representation=df.representation, t2_scaling=df.t2_scaling)
    _save(args, teacher, "ml-teacher")
    _save(args, student, "ml-student")


def cmd_defend_ft(args) -> None:
    cfg = _config(args)
    splits = harness.load_splits(Path(args.out) / "data")
    _save(args, fine_tune(_ckpt(args, cfg, "tt"), splits.clean, cfg.stage("ft")), "ft")


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    splits = harness.load_splits(out / "data")
    if not len(splits.poisoned_test):
        raise UsageError("no poisoned test set; run the poison subcommand first")
    if args.checkpoint:
        paths = [Path(args.checkpoint)]
    else:
        paths = [out / "checkpoints" / f"{n}.ckpt" for n in STAGE_FILES]
        paths = [p for p in paths if p.exists()]
    if not paths:
        raise UsageError("no checkpoints to evaluate")
    models = {p.stem: load_checkpoint(p, cfg.arch) for p in paths}
    reports = {name: evaluate(m, splits.test, splits.poisoned_test, cfg.trigger.target_class,
                              cfg.topk) for name, m in models.items()}
    base = reports.get("tt")
    if base is None and (out / "checkpoints" / "tt.ckpt").exists():
        base = evaluate(load_checkpoint(out / "checkpoints" / "tt.ckpt", cfg.arch), splits.test,
                        splits.poisoned_test, cfg.trigger.target_class, cfg.topk)
    run_id = uuid.uuid4().hex
    (out / "reports").mkdir(parents=True, exist_ok=True)
    for name, r in reports.items():
        if base is not None and name != "tt":
            r.der = der(base.asr, r.asr, base.ba, r.ba)
        harness.write_report(out / "reports" / f"{name}.json", r, cfg, run_id)
        print(json.dumps({"stage": name, **r.to_dict()}, sort_keys=True))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    spec = harness.SweepSpec(strategy=args.strategy, trials=args.trials, workers=args.workers)
    splits = harness.load_splits(Path(args.out) / "data")
    result = harness.sweep(cfg, spec, splits=splits)
    b = result.best
    print(f"best trial {b.trial}: alpha={b.alpha:.4g} beta={b.beta:.4g} der={b.der:.6f} "
          f"(asr={b.asr:.4f} ba={b.ba:.4f})")


def cmd_export_features(args) -> None:
    cfg = _config(args)
    splits = harness.load_splits(Path(args.out) / "data")
    model = (load_checkpoint(args.checkpoint, cfg.arch) if args.checkpoint
             else _ckpt(args, cfg, args.stage))
    ds = getattr(splits, args.split)
    dest = Path(args.dest) if args.dest else Path(args.out) / f"features_{model.stage}_{args.split}.csv"
    print(f"wrote {export_penultimate_features(model, ds, dest)}")


def cmd_run(args) -> None:
    cfg = _config(args)
    result = harness.run_experiment(cfg)
    for name, r in result.reports.items():
        tail = "" if r.der is None else f" der={r.der:.4f}"
        print(f"{name:11s} asr={r.asr:.4f} ba={r.ba:.4f} pa={r.pa:.4f}{tail}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
    common.add_argument("--out", required=True, help="run directory")

    parser = _Parser(prog="ntml", description="Backdoor defence lab: two-step training "
                     "and mutual-learning purification on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate the benign synthetic splits")
    add("poison", cmd_poison, "poison train/val and build the triggered test set")
    add("train-tt", cmd_train_tt, "target training on the poisoned set")
    add("train-nt", cmd_train_nt, "non-target training from the TT soft labels")
    p = add("defend-ml", cmd_defend_ml, "mutual-learning purification")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--structure", choices=("ml", "ts", "st"))
    add("defend-ft", cmd_defend_ft, "fine-tuning baseline")
    p = add("eval", cmd_eval, "evaluate checkpoints and write reports")
    p.add_argument("--checkpoint", help="evaluate one checkpoint file instead of all stages")
    p = add("sweep", cmd_sweep, "alpha/beta search over the ML stage")
    p.add_argument("--strategy", choices=("grid", "random"), default="grid")
    p.add_argument("--trials", type=int, default=12)
    p.add_argument("--workers", type=int, default=1)
    p = add("export-features", cmd_export_features, "penultimate activations as CSV")
    p.add_argument("--stage", choices=STAGE_FILES, default="ml-student")
    p.add_argument("--checkpoint", help="checkpoint file (overrides --stage)")
    p.add_argument("--split", choices=harness.SPLIT_NAMES, default="poisoned_test")
    p.add_argument("--dest", help="output CSV path")
    add("run", cmd_run, "whole pipeline in one go")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"ntml {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NTMLError, OSError) as exc:
        print(f"ntml {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
