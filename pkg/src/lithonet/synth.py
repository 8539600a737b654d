"""Procedural stand-in dataset: three grayscale texture families, one per label.

* grainstone: Poisson-disc scattered small bright grains on a dark matrix
* spherulite: larger discs whose brightness falls off radially from the centre
* stromatolite: warped low-frequency horizontal lamination

Each plug draws its own texture parameters; each slice re-samples the
geometry and adds sensor noise. Output is deterministic in ``seed``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .data import LABELS, DatasetManifest, Record, write_manifest, write_png16
from .errors import ShapeError
from .models import MIN_VARIABLE_INPUT

MANIFEST_NAME = "manifest.csv"


def poisson_disc(rng: np.random.Generator, size: int, min_dist: float, target: int, tries: int = 30) -> np.ndarray:
    """Dart-throwing Poisson-disc sample of up to ``target`` centres."""
    points: list[tuple[float, float]] = []
    for _ in range(target * tries):
        if len(points) >= target:
            break
        p = rng.uniform(0, size, 2)
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_dist ** 2 for q in points):
            points.append((p[0], p[1]))
    return np.array(points).reshape(-1, 2)


def _distances(size: int, centres: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if len(centres) == 0:
        return np.full((1, size, size), np.inf)
    return np.hypot(yy[None] - centres[:, 0, None, None], xx[None] - centres[:, 1, None, None])


def grain_texture(plug_rng: np.random.Generator, slice_rng: np.random.Generator, size: int) -> np.ndarray:
    s = size / 64.0
    radius = plug_rng.uniform(1.8, 3.0) * s
    matrix = plug_rng.uniform(0.15, 0.3)
    bright = plug_rng.uniform(0.65, 0.85)
    fill = plug_rng.uniform(0.25, 0.4)
    target = int(fill * size * size / (np.pi * radius ** 2))
    centres = poisson_disc(slice_rng, size, 2.4 * radius, target)
    d = _distances(size, centres).min(axis=0)
    coverage = np.clip(radius - d + 0.5, 0.0, 1.0)
    return matrix + (bright - matrix) * coverage


def spherulite_texture(plug_rng: np.random.Generator, slice_rng: np.random.Generator, size: int) -> np.ndarray:
    s = size / 64.0
    radius = plug_rng.uniform(5.0, 8.0) * s
    matrix = plug_rng.uniform(0.2, 0.35)
    peak = plug_rng.uniform(0.7, 0.9)
    target = int(plug_rng.uniform(0.35, 0.5) * size * size / (np.pi * radius ** 2))
    centres = poisson_disc(slice_rng, size, 1.9 * radius, max(target, 1))
    d = _distances(size, centres)
    profile = np.clip(1.0 - d / radius, 0.0, 1.0).max(axis=0)
    return matrix + (peak - matrix) * profile


def laminated_texture(plug_rng: np.random.Generator, slice_rng: np.random.Generator, size: int) -> np.ndarray:
    s = size / 64.0
    period = plug_rng.uniform(7.0, 12.0) * s
    warp_amp = plug_rng.uniform(1.0, 3.0) * s
    warp_period = plug_rng.uniform(24.0, 48.0) * s
    level = plug_rng.uniform(0.4, 0.55)
    contrast = plug_rng.uniform(0.2, 0.3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase, warp_phase = slice_rng.uniform(0, 2 * np.pi, 2)
    warped = yy + warp_amp * np.sin(2 * np.pi * xx / warp_period + warp_phase)
    return level + contrast * np.sin(2 * np.pi * warped / period + phase)


TEXTURES = {
    "grainstone": grain_texture,
    "spherulite": spherulite_texture,
    "stromatolite": laminated_texture,
}


def render_slice(label: str, seed: int, plug: int, slice_index: int, size: int) -> np.ndarray:
    """One slice as floats in ``[0, 1]``."""
    class_id = LABELS.index(label)
    plug_rng = np.random.default_rng([seed, class_id, plug])
    slice_rng = np.random.default_rng([seed, class_id, plug, slice_index + 1])
    noise = plug_rng.uniform(0.03, 0.06)
    img = TEXTURES[label](plug_rng, slice_rng, size)
    img = img + slice_rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(
    out_dir: Union[str, Path],
    plugs_per_class: int = 6,
    slices_per_plug: int = 20,
    size: int = 64,
    seed: int = 0,
) -> DatasetManifest:
    """Write 16-bit PNG slices plus ``manifest.csv`` under ``out_dir``."""
    if size < MIN_VARIABLE_INPUT:
        raise ShapeError(f"image size {size} is below the model floor of {MIN_VARIABLE_INPUT} pixels")
    if plugs_per_class < 1 or slices_per_plug < 1:
        raise ValueError("plugs_per_class and slices_per_plug must be positive")
    out_dir = Path(out_dir)
    records = []
    for label in LABELS:
        for plug in range(plugs_per_class):
            plug_id = f"{label}_{plug:03d}"
            for s in range(slices_per_plug):
                rel = f"images/{plug_id}/{s:04d}.png"
                img = render_slice(label, seed, plug, s, size)
                write_png16(np.rint(img * 65535.0), out_dir / rel)
                records.append(Record(plug_id, s, rel, label))
    manifest = DatasetManifest(records, root=out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest
