"""Confusion-matrix metrics per image and per plug (majority vote)."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .data import LABELS, Split
from .errors import UsageError
from .training import predict_proba

GRANULARITIES = ("image", "plug")


def confusion(true, predicted, classes: int = len(LABELS)) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    true = np.asarray(true, dtype=int).ravel()
    predicted = np.asarray(predicted, dtype=int).ravel()
    if true.shape != predicted.shape:
        raise ValueError(f"{true.size} true labels but {predicted.size} predictions")
    matrix = np.zeros((classes, classes), dtype=int)
    np.add.at(matrix, (true, predicted), 1)
    return matrix


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    undefined = den == 0
    out = np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=~undefined)
    return out, undefined


@dataclass
class EvalReport:
    granularity: str
    confusion: list[list[int]]
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    # per-class metric names whose denominator was zero and were set to 0
    undefined: dict[str, list[str]] = field(default_factory=dict)
    ties: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(np.sum(self.confusion))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self) -> str:
        lines = [f"{self.granularity}-level accuracy {self.accuracy:.4f} over {self.total} items"]
        lines.append(f"{'class':<14}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}")
        for i, name in enumerate(LABELS[: len(self.precision)]):
            lines.append(
                f"{name:<14}{self.precision[i]:>10.4f}{self.recall[i]:>10.4f}{self.f1[i]:>10.4f}{self.support[i]:>9d}"
            )
        return "\n".join(lines)


def metrics(matrix, granularity: str = "image", ties: Sequence[str] = ()) -> EvalReport:
    m = np.asarray(matrix, dtype=np.int64)
    tp = np.diag(m).astype(np.float64)
    predicted = m.sum(axis=0).astype(np.float64)
    actual = m.sum(axis=1).astype(np.float64)
    precision, p_undef = _safe_ratio(tp, predicted)
    recall, r_undef = _safe_ratio(tp, actual)
    f1, f_undef = _safe_ratio(2 * precision * recall, precision + recall)
    total = m.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    names = list(LABELS[: m.shape[0]]) if m.shape[0] <= len(LABELS) else [str(i) for i in range(m.shape[0])]
    undefined = {
        key: [names[i] for i in np.flatnonzero(mask)]
        for key, mask in (("precision", p_undef), ("recall", r_undef), ("f1", f_undef))
        if mask.any()
    }
    if not total:
        undefined["accuracy"] = ["all"]
    return EvalReport(
        granularity=granularity,
        confusion=m.tolist(),
        accuracy=accuracy,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=actual.astype(int).tolist(),
        undefined=undefined,
        ties=list(ties),
    )


def majority_vote(predictions: Sequence[int], classes: int = len(LABELS)) -> tuple[int, bool]:
    """Modal class and whether it was tied; ties go to the lowest class index."""
    counts = np.bincount(np.asarray(predictions, dtype=int), minlength=classes)
    if counts.sum() == 0:
        raise UsageError("cannot vote over an empty set of predictions")
    winner = int(counts.argmax())
    return winner, bool((counts == counts[winner]).sum() > 1)


def vote_by_plug(plugs: Sequence[str], predictions: Sequence[int], classes: int = len(LABELS)):
    """``{plug: (label, tied)}`` over per-image predictions."""
    grouped: dict[str, list[int]] = defaultdict(list)
    for plug, pred in zip(plugs, predictions):
        grouped[plug].append(int(pred))
    return {plug: majority_vote(preds, classes) for plug, preds in sorted(grouped.items())}


def score(
    true: Sequence[int], predicted: Sequence[int], plugs: Sequence[str], granularity: str, classes: int = len(LABELS)
) -> EvalReport:
    """Score image-level predictions at either granularity."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    if granularity == "image":
        return metrics(confusion(true, predicted, classes), "image")
    votes = vote_by_plug(plugs, predicted, classes)
    plug_true: dict[str, int] = {}
    for plug, t in zip(plugs, true):
        if plug_true.setdefault(plug, int(t)) != int(t):
            raise ValueError(f"plug {plug} has images with different true labels")
    names = sorted(votes)
    matrix = confusion([plug_true[p] for p in names], [votes[p][0] for p in names], classes)
    return metrics(matrix, "plug", ties=[p for p in names if votes[p][1]])


def evaluate(model, split: Split, granularity: str = "image", batch_size: int = 32) -> EvalReport:
    """Inference-mode evaluation of ``model`` on ``split``."""
    if len(split) == 0:
        raise UsageError("cannot evaluate an empty split")
    predicted = predict_proba(model, split.images, batch_size).argmax(axis=1)
    return score(split.labels, predicted, split.plugs, granularity, model.spec.classes)


AGGREGATE_FIELDS = ["run_id", "test_fold", "val_fold", "granularity", "accuracy"] + [
    f"{metric}_{label}" for label in LABELS for metric in ("precision", "recall", "f1")
]


def aggregate_row(run_id: str, test: int, val: int, report: EvalReport) -> dict:
    row = {
        "run_id": run_id,
        "test_fold": test,
        "val_fold": val,
        "granularity": report.granularity,
        "accuracy": report.accuracy,
    }
    for i, label in enumerate(LABELS):
        row[f"precision_{label}"] = report.precision[i]
        row[f"recall_{label}"] = report.recall[i]
        row[f"f1_{label}"] = report.f1[i]
    return row


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_rows(rows: Iterable[dict], fields: Sequence[str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[f]) for f in fields])
    return path


SUMMARY_FIELDS = ["granularity", "aggregation", "metric", "mean", "std", "n"]


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean and standard deviation per metric, two ways.

    ``runs`` treats every fitted model as one sample; ``test_folds`` first
    averages the models sharing a test fold.
    """
    metric_names = [f for f in AGGREGATE_FIELDS if f not in ("run_id", "test_fold", "val_fold", "granularity")]
    out = []
    for granularity in GRANULARITIES:
        subset = [r for r in rows if r["granularity"] == granularity]
        if not subset:
            continue
        by_test: dict[int, list[dict]] = defaultdict(list)
        for r in subset:
            by_test[int(r["test_fold"])].append(r)
        for metric in metric_names:
            per_run = np.array([r[metric] for r in subset], dtype=np.float64)
            per_fold = np.array(
                [np.mean([r[metric] for r in group]) for _, group in sorted(by_test.items())]
            )
            for name, values in (("runs", per_run), ("test_folds", per_fold)):
                out.append({
                    "granularity": granularity,
                    "aggregation": name,
                    "metric": metric,
                    "mean": float(values.mean()),
                    "std": float(values.std()),
                    "n": int(values.size),
                })
    return out


def summary_table(summary: Sequence[dict], aggregation: str = "runs") -> str:
    lines = []
    for row in summary:
        if row["aggregation"] == aggregation and row["metric"] == "accuracy":
            lines.append(
                f"{row['granularity']:>5}-level accuracy: {100 * row['mean']:.2f} ± {100 * row['std']:.2f} % "
                f"(n={row['n']}, over {aggregation})"
            )
    return "\n".join(lines)
