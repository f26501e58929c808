"""
Labelled image manifests, one-hot labels and the stratified 80:20 split.

Manifest files are UTF-8 CSV with header `path,label` and an optional `split` column. Relative
paths resolve against the manifest's directory. Class index 0 is the positive class (covid).
"""

from collections.abc import Iterable
import csv
from dataclasses import dataclass, replace
import logging
import math
from pathlib import Path
from typing import Literal, get_args

import numpy as np

from covilearn.errors import ArgumentError, FormatError
from covilearn.imaging import IMAGE_SIZE, load_preprocessed
from covilearn.tensor import Tensor

logger = logging.getLogger(__name__)

Label = Literal["covid", "normal"]
Split = Literal["train", "test"]

LABELS: tuple[Label, ...] = get_args(Label)
POSITIVE: Label = "covid"


def label_index(label: str) -> int:
    try:
        return LABELS.index(label)  # type: ignore[arg-type]
    except ValueError:
        raise ArgumentError(f"unknown label '{label}', expected one of {', '.join(LABELS)}") from None


def one_hot(label: str) -> Tensor:
    """covid -> [1, 0], normal -> [0, 1]."""
    encoded = np.zeros(len(LABELS))
    encoded[label_index(label)] = 1.0
    return Tensor.wrap(encoded)


def label_from_index(index: int) -> Label:
    if not 0 <= index < len(LABELS):
        raise ArgumentError(f"class index {index} out of range")
    return LABELS[index]


def label_from_one_hot(encoded: Tensor) -> Label:
    return label_from_index(int(np.argmax(encoded.numpy())))


@dataclass(frozen=True)
class ManifestRecord:
    path: Path
    label: Label
    split: Split | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]

    def __post_init__(self) -> None:
        seen: set[Path] = set()
        for record in self.records:
            if record.path in seen:
                raise ArgumentError(f"duplicate manifest path: {record.path}")
            seen.add(record.path)
            label_index(record.label)

    def __len__(self) -> int:
        return len(self.records)

    def of_split(self, split: Split) -> "DatasetManifest":
        return DatasetManifest(tuple(r for r in self.records if r.split == split))

    def of_label(self, label: Label) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.label == label)

    @property
    def is_split(self) -> bool:
        return bool(self.records) and all(r.split is not None for r in self.records)

    def counts(self) -> dict[str, int]:
        counts = {f"{split}/{label}": 0 for split in get_args(Split) for label in LABELS}
        for record in self.records:
            if record.split is not None:
                counts[f"{record.split}/{record.label}"] += 1
        return counts


def read_manifest(path: Path) -> DatasetManifest:
    root = path.parent
    records = []
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        if "path" not in fields or "label" not in fields:
            raise FormatError(f"{path}: manifest header must contain 'path,label', got {','.join(fields)}")
        for line, row in enumerate(reader, start=2):
            label = (row["label"] or "").strip().lower()
            if label not in LABELS:
                raise FormatError(f"{path}:{line}: unknown label '{row['label']}'")
            split = (row.get("split") or "").strip().lower() or None
            if split is not None and split not in get_args(Split):
                raise FormatError(f"{path}:{line}: unknown split '{row['split']}'")
            record_path = Path(row["path"].strip())
            if not record_path.is_absolute():
                record_path = root / record_path
            records.append(ManifestRecord(record_path, label, split))  # type: ignore[arg-type]
    return DatasetManifest(tuple(records))


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    root = path.parent.resolve()
    with_split = any(r.split is not None for r in manifest.records)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "split"] if with_split else ["path", "label"])
        for record in manifest.records:
            try:
                shown = record.path.resolve().relative_to(root)
            except ValueError:
                shown = record.path
            row = [shown.as_posix(), record.label]
            if with_split:
                row.append(record.split or "")
            writer.writerow(row)


def split_80_20(manifest: DatasetManifest, seed: int, test_fraction: float = 0.2) -> DatasetManifest:
    """
    Stratified split: per class, round(test_fraction * class size) records go to test.

    Records are ordered by path before the seeded shuffle, so the assignment depends only on
    (record set, seed).
    """
    rng = np.random.default_rng(seed)
    assigned: dict[Path, Split] = {}
    for label in LABELS:
        members = sorted(manifest.of_label(label), key=lambda r: r.path.as_posix())
        if not members:
            raise ArgumentError(f"cannot split: class '{label}' has no records")
        n_test = math.floor(test_fraction * len(members) + 0.5)
        order = rng.permutation(len(members))
        for rank, index in enumerate(order):
            assigned[members[index].path] = "test" if rank < n_test else "train"
    result = DatasetManifest(tuple(replace(r, split=assigned[r.path]) for r in manifest.records))
    logger.info("split %d records with seed %d: %s", len(result), seed, result.counts())
    return result


def manifest_from_records(records: Iterable[tuple[Path | str, str]]) -> DatasetManifest:
    return DatasetManifest(tuple(ManifestRecord(Path(p), label) for p, label in records))  # type: ignore[arg-type]


@dataclass(frozen=True)
class Sample:
    pixels: Tensor
    label: Tensor

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ArgumentError(f"sample pixels must be (3, H, W), got {self.pixels.shape}")
        pixels = self.pixels.numpy()
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ArgumentError("sample pixels must lie in [0, 1]")
        encoded = self.label.numpy()
        if encoded.shape != (len(LABELS),) or sorted(encoded.tolist()) != [0.0, 1.0]:
            raise ArgumentError(f"sample label must be one-hot over {len(LABELS)} classes, got {encoded.tolist()}")

    @property
    def label_name(self) -> Label:
        return label_from_one_hot(self.label)


def load_samples(manifest: DatasetManifest, *, size: int = IMAGE_SIZE) -> list[Sample]:
    """Decode and preprocess every record. A missing file raises `MissingFileError` naming it."""
    samples = [Sample(load_preprocessed(r.path, size=size), one_hot(r.label)) for r in manifest.records]
    logger.debug("loaded %d samples at %dx%d", len(samples), size, size)
    return samples
