"""Command-line entry point: ``lithonet <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .data import FoldPlan, plan_folds, read_manifest
from .errors import LithonetError
from .evaluation import evaluate, summary_table
from .models import build, load_checkpoint, read_checkpoint_header
from .pipeline import SplitCache, fit_run, load_config, nested_cv, resolve_plan, write_config_echo
from .synth import MANIFEST_NAME, synth_generate


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration; flags override it")
    p.add_argument("--model", help="variant: 1-4 or Model1..Model4")
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--plan", help="fold plan JSON (default: planned from the manifest)")
    p.add_argument("--image-mode", choices=("resized", "original"))
    p.add_argument("--image-size", type=int)
    p.add_argument("-k", "--folds", dest="k", type=int)
    p.add_argument("--fold-seed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--class-weights", type=float, nargs="+")
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)


def _run_config(args: argparse.Namespace):
    overrides = {
        "model": args.model,
        "manifest": args.manifest,
        "plan": args.plan,
        "image_mode": args.image_mode,
        "image_size": args.image_size,
        "k": args.k,
        "fold_seed": args.fold_seed,
        "seed": args.seed,
        "out": args.out,
        "workers": args.workers,
        "class_weights": args.class_weights,
        "train": {
            "max_epochs": args.max_epochs,
            "patience": args.patience,
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
        },
    }
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    manifest = synth_generate(args.out, args.plugs_per_class, args.slices, args.size, args.seed)
    path = Path(args.out) / MANIFEST_NAME
    (Path(args.out) / "synth.json").write_text(json.dumps({
        "plugs_per_class": args.plugs_per_class,
        "slices": args.slices,
        "size": args.size,
        "seed": args.seed,
        "images": len(manifest),
    }, indent=2, sort_keys=True) + "\n")
    print(path)
    return 0


def cmd_params(args) -> int:
    print(build(args.model).count_params())
    return 0


def cmd_plan_folds(args) -> int:
    manifest = read_manifest(args.manifest)
    plan = plan_folds(manifest, args.k, args.seed)
    plan.check_leakage()
    if args.out:
        plan.save(args.out)
        print(args.out)
    else:
        print(json.dumps(plan.to_dict(), indent=2))
    return 0


def cmd_train(args) -> int:
    config = _run_config(args)
    if not config.manifest:
        raise LithonetError("train needs --manifest (or manifest in --config)")
    manifest = read_manifest(config.manifest)
    plan = resolve_plan(config, manifest)
    out = Path(config.out)
    write_config_echo(config, out / "config.yaml")
    plan.save(out / "folds.json")
    _, result, reports = fit_run(config, manifest, plan, args.test_fold, args.val_fold, out_dir=out)
    print(f"best epoch {result.best_epoch} of {len(result.history)}")
    for report in reports.values():
        print(report.table())
    return 0


def cmd_eval(args) -> int:
    header, _ = read_checkpoint_header(args.checkpoint)
    saved = header.get("extra", {})
    mode = args.image_mode or saved.get("image_mode", "resized")
    size = args.image_size or saved.get("image_size", 256)
    model = load_checkpoint(args.checkpoint)
    if mode == "original" and model.spec.fixed_size:
        raise LithonetError(f"{model.spec.variant} takes fixed 256x256 inputs; original images are not allowed")
    manifest = read_manifest(args.manifest)
    if args.plugs:
        plugs = args.plugs
    elif args.split == "all":
        plugs = manifest.plugs
    else:
        if args.plan is None:
            raise LithonetError("--split train|val|test needs --plan")
        plan = FoldPlan.load(args.plan)
        test = saved.get("test_fold") if args.test_fold is None else args.test_fold
        val = saved.get("val_fold") if args.val_fold is None else args.val_fold
        if test is None or val is None:
            raise LithonetError("cannot tell which folds to use; pass --test-fold and --val-fold")
        train_p, val_p, test_p = plan.split(test, val)
        plugs = {"train": train_p, "val": val_p, "test": test_p}[args.split]
    split = SplitCache(manifest, mode, size).get(plugs)
    granularities = ("image", "plug") if args.granularity == "both" else (args.granularity,)
    out = Path(args.out) if args.out else None
    for g in granularities:
        report = evaluate(model, split, g)
        print(report.table())
        if out is not None:
            report.save(out / f"report_{g}.txt")
    if out is not None:
        (out / "eval_config.json").write_text(json.dumps({
            "checkpoint": str(args.checkpoint),
            "manifest": str(args.manifest),
            "image_mode": mode,
            "image_size": size,
            "plugs": sorted(plugs),
        }, indent=2) + "\n")
    return 0


def cmd_nested_cv(args) -> int:
    config = _run_config(args)
    result = nested_cv(config)
    print(summary_table(result["summary"], "runs"))
    print(summary_table(result["summary"], "test_folds"))
    print(Path(config.out) / "aggregate.csv")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lithonet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic texture dataset")
    p.add_argument("--plugs-per-class", type=int, default=6)
    p.add_argument("--slices", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("params", help="print a variant's trainable parameter count")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("plan-folds", help="assign plugs to stratified folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("-k", "--folds", dest="k", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan_folds)

    p = sub.add_parser("train", help="fit one (test, validation) fold pair")
    _add_run_flags(p)
    p.add_argument("--test-fold", type=int, required=True)
    p.add_argument("--val-fold", type=int, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--plugs", nargs="+")
    p.add_argument("--test-fold", type=int)
    p.add_argument("--val-fold", type=int)
    p.add_argument("--granularity", choices=("image", "plug", "both"), default="both")
    p.add_argument("--image-mode", choices=("resized", "original"))
    p.add_argument("--image-size", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("nested-cv", help="run all k*(k-1) fits and aggregate")
    _add_run_flags(p)
    p.set_defaults(func=cmd_nested_cv)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (LithonetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
