"""
Desk-scale separable dataset: constant-intensity images labelled normal, intensity ramps labelled covid.
"""

from collections.abc import Iterator
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from covilearn.dataset import DatasetManifest, Label, ManifestRecord, write_manifest
from covilearn.errors import ArgumentError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"


def constant_image(size: int, level: float) -> np.ndarray:
    return np.full((size, size), level)


def ramp_image(size: int, low: float, high: float, *, vertical: bool, reverse: bool) -> np.ndarray:
    ramp = np.linspace(low, high, size)
    if reverse:
        ramp = ramp[::-1]
    grid = np.tile(ramp, (size, 1))
    return grid.T.copy() if vertical else grid


def synthetic_images(per_class: int, size: int, seed: int) -> Iterator[tuple[Label, np.ndarray]]:
    """Yield (label, 8-bit grayscale image), alternating covid and normal."""
    if per_class < 1 or size < 2:
        raise ArgumentError(f"need per_class >= 1 and size >= 2, got {per_class} and {size}")
    rng = np.random.default_rng(seed)
    for _ in range(per_class):
        low, high = rng.uniform(0.0, 0.1), rng.uniform(0.9, 1.0)
        vertical, reverse = bool(rng.integers(2)), bool(rng.integers(2))
        covid = ramp_image(size, low, high, vertical=vertical, reverse=reverse)
        normal = constant_image(size, rng.uniform(0.2, 0.8))
        yield "covid", np.round(covid * 255).astype(np.uint8)
        yield "normal", np.round(normal * 255).astype(np.uint8)


def write_synthetic_dataset(out: Path, per_class: int = 100, size: int = 32, seed: int = 0) -> Path:
    """Write PNGs under `out/<label>/` plus `out/manifest.csv`; returns the manifest path."""
    records = []
    counters = {"covid": 0, "normal": 0}
    for label, pixels in synthetic_images(per_class, size, seed):
        directory = out / label
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{label}_{counters[label]:04d}.png"
        counters[label] += 1
        Image.fromarray(pixels).save(path)
        records.append(ManifestRecord(path, label))
    manifest_path = out / MANIFEST_NAME
    write_manifest(DatasetManifest(tuple(records)), manifest_path)
    logger.info("wrote %d synthetic images to %s", len(records), out)
    return manifest_path
