"""Run configuration and the nested cross-validation driver."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from .data import RESIZED, DatasetManifest, FoldPlan, Split, load_split, plan_folds, read_manifest
from .errors import UsageError
from .evaluation import (
    AGGREGATE_FIELDS,
    SUMMARY_FIELDS,
    EvalReport,
    aggregate_row,
    evaluate,
    summarize,
    write_rows,
)
from .models import ModelSpec, build, normalize_variant, save_checkpoint
from .training import TrainConfig, class_weights_from_counts, train

log = logging.getLogger(__name__)

IMAGE_MODES = ("resized", "original")


@dataclass
class RunConfig:
    model: str = "Model2"
    manifest: Optional[str] = None
    plan: Optional[str] = None
    image_mode: str = "resized"
    image_size: int = RESIZED
    k: int = 6
    fold_seed: int = 0
    seed: int = 0
    out: str = "out"
    workers: int = 1
    # None: derive from the training plugs' class counts
    class_weights: Optional[list[float]] = None
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.model = normalize_variant(self.model)
        self.validate()

    def validate(self) -> None:
        if self.image_mode not in IMAGE_MODES:
            raise UsageError(f"image_mode must be one of {IMAGE_MODES}, got {self.image_mode!r}")
        if self.image_mode == "original" and self.model == "Model1":
            raise UsageError("Model1 takes fixed 256x256 inputs; use --image-mode resized")
        if self.k < 3:
            raise UsageError("k must be at least 3")
        if self.workers < 1:
            raise UsageError("workers must be positive")
        # surfaces bad training settings before anything runs
        self.train_config(0)

    def train_config(self, seed: int, class_weights=None) -> TrainConfig:
        settings = dict(self.train)
        settings["seed"] = seed
        settings["class_weights"] = class_weights
        return TrainConfig(**settings)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "manifest": self.manifest,
            "plan": self.plan,
            "image_mode": self.image_mode,
            "image_size": self.image_size,
            "k": self.k,
            "fold_seed": self.fold_seed,
            "seed": self.seed,
            "out": self.out,
            "workers": self.workers,
            "class_weights": self.class_weights,
            "train": {k: v for k, v in TrainConfig(**self.train).to_dict().items() if k not in ("seed", "class_weights")},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**copy.deepcopy(data))


def load_config(path: Union[str, Path, None], overrides: Optional[dict] = None) -> RunConfig:
    """YAML file settings, then non-None ``overrides`` on top (nested ``train`` merged)."""
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: config must be a mapping")
        data.update(loaded)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "train":
            data["train"] = {**data.get("train", {}), **{k: v for k, v in value.items() if v is not None}}
        else:
            data[key] = value
    return RunConfig.from_dict(data)


def write_config_echo(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return path


def run_seed(seed: int, test: int, val: int) -> int:
    """Seed for one nested-CV run; a function of its identity, not of scheduling."""
    return int(np.random.SeedSequence([seed, test, val]).generate_state(1, dtype=np.uint64)[0] >> 1)


def run_id(test: int, val: int) -> str:
    return f"{test}_{val}"


def resolve_plan(config: RunConfig, manifest: DatasetManifest) -> FoldPlan:
    if config.plan:
        plan = FoldPlan.load(config.plan)
        if set(plan.assignment) != set(manifest.plugs):
            raise UsageError(f"fold plan {config.plan} does not cover exactly the manifest's plugs")
    else:
        plan = plan_folds(manifest, config.k, config.fold_seed)
    plan.check_leakage()
    return plan


class SplitCache:
    """Preprocessed images per plug, loaded on first use."""

    def __init__(self, manifest: DatasetManifest, mode: str, size: int):
        self.manifest = manifest
        self.mode = mode
        self.size = size
        self._plugs: dict[str, Split] = {}

    def get(self, plugs) -> Split:
        images, labels, owners = [], [], []
        for plug in sorted(plugs):
            if plug not in self._plugs:
                self._plugs[plug] = load_split(self.manifest, [plug], self.mode, self.size)
            s = self._plugs[plug]
            images += s.images
            labels.append(s.labels)
            owners += s.plugs
        return Split(images, np.concatenate(labels) if labels else np.array([], dtype=int), owners)


def fit_run(
    config: RunConfig,
    manifest: DatasetManifest,
    plan: FoldPlan,
    test: int,
    val: int,
    cache: Optional[SplitCache] = None,
    out_dir: Union[str, Path, None] = None,
):
    """Train one (test, validation) pair and score it on its test fold.

    Returns ``(model, train_result, {granularity: report})``; artifacts go
    to ``out_dir`` when given.
    """
    cache = cache or SplitCache(manifest, config.image_mode, config.image_size)
    train_plugs, val_plugs, test_plugs = plan.split(test, val)
    train_split = cache.get(train_plugs)
    val_split = cache.get(val_plugs)
    test_split = cache.get(test_plugs)

    seed = run_seed(config.seed, test, val)
    weights = config.class_weights
    if weights is None:
        counts = np.bincount(train_split.labels, minlength=3)
        weights = class_weights_from_counts(np.maximum(counts, 1)).tolist()
    tc = config.train_config(seed, weights)
    model = build(ModelSpec(variant=config.model), seed=seed)

    out = Path(out_dir) if out_dir is not None else None
    started = time.perf_counter()
    result = train(
        model,
        train_split.as_pair(),
        val_split.as_pair(),
        tc,
        history_path=None if out is None else out / "history.csv",
    )
    log.info(
        "run %s: %d epochs (best %d) in %.1fs",
        run_id(test, val), len(result.history), result.best_epoch, time.perf_counter() - started,
    )
    reports = {g: evaluate(model, test_split, g) for g in ("image", "plug")}
    if out is not None:
        save_checkpoint(
            model,
            out / "checkpoint",
            extra={
                "image_mode": config.image_mode,
                "image_size": config.image_size,
                "test_fold": test,
                "val_fold": val,
                "best_epoch": result.best_epoch,
            },
        )
        reports["image"].save(out / "report_image.txt")
        reports["plug"].save(out / "report_plug.txt")
    return model, result, reports


def _worker(config_dict: dict, manifest_path: str, plan_dict: dict, test: int, val: int, out_dir: str):
    config = RunConfig.from_dict(config_dict)
    manifest = read_manifest(manifest_path)
    plan = FoldPlan.from_dict(plan_dict)
    _, _, reports = fit_run(config, manifest, plan, test, val, out_dir=out_dir)
    return {g: r.to_dict() for g, r in reports.items()}


def nested_cv(config: RunConfig) -> dict:
    """All ``k * (k - 1)`` fits; writes the run tree and returns the summary."""
    if not config.manifest:
        raise UsageError("nested-cv needs a dataset manifest")
    manifest = read_manifest(config.manifest)
    plan = resolve_plan(config, manifest)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(config, out / "config.yaml")
    plan.save(out / "folds.json")

    results: dict[tuple[int, int], dict] = {}
    if config.workers == 1:
        cache = SplitCache(manifest, config.image_mode, config.image_size)
        for test, val in plan.runs:
            _, _, reports = fit_run(
                config, manifest, plan, test, val, cache, out / "runs" / run_id(test, val)
            )
            results[(test, val)] = reports
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {
                (test, val): pool.submit(
                    _worker,
                    config.to_dict(),
                    str(config.manifest),
                    plan.to_dict(),
                    test,
                    val,
                    str(out / "runs" / run_id(test, val)),
                )
                for test, val in plan.runs
            }
            for key, future in futures.items():
                results[key] = {g: EvalReport.from_dict(r) for g, r in future.result().items()}

    rows = [
        aggregate_row(run_id(test, val), test, val, results[(test, val)][g])
        for g in ("image", "plug")
        for test, val in plan.runs
    ]
    write_rows(rows, AGGREGATE_FIELDS, out / "aggregate.csv")
    summary = summarize(rows)
    write_rows(summary, SUMMARY_FIELDS, out / "summary.csv")
    return {"rows": rows, "summary": summary, "plan": plan}
