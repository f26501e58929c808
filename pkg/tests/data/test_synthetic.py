from pathlib import Path

import numpy as np
from PIL import Image
import pytest

from covilearn.dataset import read_manifest
from covilearn.errors import ArgumentError
from covilearn.synthetic import MANIFEST_NAME, ramp_image, synthetic_images, write_synthetic_dataset


def test_ramp_orientation() -> None:
    ramp = ramp_image(4, 0.0, 1.0, vertical=False, reverse=False)
    assert ramp[0].tolist() == pytest.approx([0.0, 1 / 3, 2 / 3, 1.0])
    assert np.array_equal(ramp_image(4, 0.0, 1.0, vertical=True, reverse=False), ramp.T)
    assert ramp_image(4, 0.0, 1.0, vertical=False, reverse=True)[0, 0] == 1.0


def test_synthetic_classes_are_separable() -> None:
    images = list(synthetic_images(20, 16, seed=1))
    assert [label for label, _ in images[:4]] == ["covid", "normal", "covid", "normal"]
    for label, pixels in images:
        assert pixels.dtype == np.uint8
        spread = int(pixels.max()) - int(pixels.min())
        if label == "normal":
            assert spread == 0
        else:
            assert spread >= 200


def test_synthetic_is_seeded() -> None:
    first = [pixels for _, pixels in synthetic_images(5, 8, seed=3)]
    second = [pixels for _, pixels in synthetic_images(5, 8, seed=3)]
    assert all(np.array_equal(a, b) for a, b in zip(first, second, strict=True))


def test_synthetic_rejects_empty() -> None:
    with pytest.raises(ArgumentError):
        list(synthetic_images(0, 8, seed=0))


def test_write_synthetic_dataset(tmp_path: Path) -> None:
    manifest_path = write_synthetic_dataset(tmp_path / "synth", per_class=3, size=8, seed=0)
    assert manifest_path == tmp_path / "synth" / MANIFEST_NAME

    manifest = read_manifest(manifest_path)
    assert len(manifest) == 6
    assert len(manifest.of_label("covid")) == 3
    assert len(manifest.of_label("normal")) == 3
    for record in manifest.records:
        assert record.path.exists()
        with Image.open(record.path) as image:
            assert image.size == (8, 8)
            assert image.mode == "L"
