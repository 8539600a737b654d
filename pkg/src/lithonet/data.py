"""Plug-grouped datasets, preprocessing and nested k-fold planning."""

from __future__ import annotations

import csv
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import ShapeError, UsageError

LABELS = ("grainstone", "spherulite", "stromatolite")
MANIFEST_FIELDS = ("plug_id", "slice_index", "path", "label")
RESIZED = 256
STD_EPS = 1e-8


def label_index(label: str) -> int:
    try:
        return LABELS.index(label)
    except ValueError:
        raise ValueError(f"unknown label {label!r}; expected one of {'|'.join(LABELS)}") from None


@dataclass(frozen=True)
class Record:
    plug_id: str
    slice_index: int
    path: str
    label: str


@dataclass
class DatasetManifest:
    """Slice records; ``root`` anchors relative image paths."""

    records: list[Record]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        labels: dict[str, str] = {}
        seen: set[tuple[str, int]] = set()
        for r in self.records:
            label_index(r.label)
            if labels.setdefault(r.plug_id, r.label) != r.label:
                raise ValueError(
                    f"plug {r.plug_id} has slices labelled both {labels[r.plug_id]} and {r.label}"
                )
            key = (r.plug_id, r.slice_index)
            if key in seen:
                raise ValueError(f"plug {r.plug_id} lists slice {r.slice_index} twice")
            seen.add(key)

    @property
    def plugs(self) -> list[str]:
        return sorted({r.plug_id for r in self.records})

    def plug_labels(self) -> dict[str, str]:
        return {r.plug_id: r.label for r in self.records}

    def records_for(self, plugs: Iterable[str]) -> list[Record]:
        wanted = set(plugs)
        return [r for r in self.records if r.plug_id in wanted]

    def class_counts(self, plugs: Optional[Iterable[str]] = None) -> list[int]:
        records = self.records if plugs is None else self.records_for(plugs)
        counts = [0] * len(LABELS)
        for r in records:
            counts[label_index(r.label)] += 1
        return counts

    def image_path(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def __len__(self):
        return len(self.records)


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        records = [
            Record(row["plug_id"], int(row["slice_index"]), row["path"], row["label"]) for row in reader
        ]
    return DatasetManifest(records, root=path.parent)


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            writer.writerow((r.plug_id, r.slice_index, r.path, r.label))
    return path


def write_png16(pixels: np.ndarray, path: Union[str, Path]) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        arr = np.clip(np.rint(arr), 0, 65535).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def read_image(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ShapeError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr.astype(np.float64)


def standardize(image) -> np.ndarray:
    """``(x - mean) / (std + 1e-8)`` with the population standard deviation."""
    x = np.asarray(image, dtype=np.float64)
    return (x - x.mean()) / (x.std() + STD_EPS)


def _axis_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image, out_h: int = RESIZED, out_w: int = RESIZED) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    r0, r1, fr = _axis_taps(x.shape[0], out_h)
    c0, c1, fc = _axis_taps(x.shape[1], out_w)
    rows = x[r0] * (1.0 - fr)[:, None] + x[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc) + rows[:, c1] * fc


def preprocess(image, mode: str = "resized", size: int = RESIZED) -> np.ndarray:
    if mode == "resized":
        image = resize_bilinear(image, size, size)
    elif mode != "original":
        raise ValueError(f"image mode must be 'resized' or 'original', got {mode!r}")
    return standardize(image)


def select_equally_spaced(available: int, n: int = 100) -> list[int]:
    """``round(i * (T - 1) / (n - 1))`` for ``i`` in ``0..n-1`` (halves round up)."""
    if n < 1:
        raise ValueError("must select at least one slice")
    if available < n:
        raise ValueError(f"insufficient slices: {available} available, {n} requested")
    if n == 1:
        return [0]
    span = available - 1
    return [(2 * i * span + (n - 1)) // (2 * (n - 1)) for i in range(n)]


@dataclass
class Split:
    """Preprocessed images of one role (train, validation or test)."""

    images: list[np.ndarray]
    labels: np.ndarray
    plugs: list[str]

    def __len__(self):
        return len(self.images)

    def as_pair(self):
        return self.images, self.labels


def load_split(
    manifest: DatasetManifest, plugs: Iterable[str], mode: str = "resized", size: int = RESIZED
) -> Split:
    records = sorted(manifest.records_for(plugs), key=lambda r: (r.plug_id, r.slice_index))
    images = [preprocess(read_image(manifest.image_path(r)), mode, size) for r in records]
    labels = np.array([label_index(r.label) for r in records], dtype=int)
    return Split(images, labels, [r.plug_id for r in records])


@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]
    runs: list[tuple[int, int]]
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    def fold(self, index: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f == index)

    def folds(self) -> list[list[str]]:
        return [self.fold(i) for i in range(self.k)]

    def split(self, test: int, val: int) -> tuple[list[str], list[str], list[str]]:
        """Plug ids for ``(train, validation, test)`` of one run."""
        if test == val:
            raise UsageError("test and validation folds must differ")
        train = sorted(p for p, f in self.assignment.items() if f not in (test, val))
        return train, self.fold(val), self.fold(test)

    def check_leakage(self) -> None:
        """Raise if folds or any run's roles overlap or miss plugs."""
        if len(self.runs) != self.k * (self.k - 1) or len(set(self.runs)) != len(self.runs):
            raise UsageError(f"run list must hold {self.k * (self.k - 1)} distinct (test, val) pairs")
        if any(not 0 <= f < self.k for f in self.assignment.values()):
            raise UsageError("fold index out of range")
        everyone = set(self.assignment)
        for test, val in self.runs:
            train, v, t = (set(s) for s in self.split(test, val))
            if train & v or train & t or v & t:
                raise UsageError(f"run {test}_{val}: plug sets overlap")
            if train | v | t != everyone:
                raise UsageError(f"run {test}_{val}: plug sets do not cover every plug")
            if not (train and v and t):
                raise UsageError(f"run {test}_{val}: a role has no plugs")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": {str(i): self.fold(i) for i in range(self.k)},
            "runs": [list(r) for r in self.runs],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FoldPlan":
        assignment = {p: int(f) for f, plugs in data["folds"].items() for p in plugs}
        runs = [tuple(r) for r in data["runs"]]
        return cls(int(data["k"]), assignment, runs, int(data.get("seed", 0)), list(data.get("warnings", [])))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FoldPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def nested_runs(k: int) -> list[tuple[int, int]]:
    return [(test, val) for test in range(k) for val in range(k) if val != test]


def plan_folds(manifest: DatasetManifest, k: int = 6, seed: int = 0) -> FoldPlan:
    """Shuffle each class's plugs and deal them round-robin into ``k`` folds."""
    if k < 3:
        raise ValueError("nested cross-validation needs k >= 3 (train, validation and test folds)")
    by_class: dict[str, list[str]] = defaultdict(list)
    for plug, label in sorted(manifest.plug_labels().items()):
        by_class[label].append(plug)
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    notes = []
    cursor = 0
    for label in LABELS:
        plugs = by_class.get(label, [])
        if not plugs:
            continue
        if len(plugs) < k:
            notes.append(f"class {label} has {len(plugs)} plugs for {k} folds; some folds lack it")
        elif len(plugs) % k:
            notes.append(f"class {label}: {len(plugs)} plugs do not divide evenly into {k} folds")
        for plug in rng.permutation(plugs):
            assignment[str(plug)] = cursor % k
            cursor += 1
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return FoldPlan(k, assignment, nested_runs(k), seed, notes)
