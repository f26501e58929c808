from pathlib import Path

import numpy as np
import pytest

from covilearn.dicom import emit_dicom_lite
from covilearn.errors import ArgumentError, DimensionError, FormatError, MissingFileError
from covilearn.imaging import (
    IMAGE_SIZE,
    PNG_SIGNATURE,
    ImageFormat,
    dataset_mean,
    decode_image,
    load_image,
    load_preprocessed,
    preprocess,
    resize_bilinear,
    sniff_format,
)
from covilearn.tensor import Tensor
from tests.utilities import jpeg_bytes, png_bytes, png_header


def bilinear_oracle(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear sampling with source coordinates clamped to the image."""
    in_h, in_w = image.shape
    out = np.zeros((height, width))
    for y in range(height):
        sy = min(max((y + 0.5) * in_h / height - 0.5, 0.0), in_h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for x in range(width):
            sx = min(max((x + 0.5) * in_w / width - 0.5, 0.0), in_w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
            bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
            out[y, x] = top * (1 - fy) + bottom * fy
    return out


def test_constant_white_has_no_resize() -> None:
    out = preprocess(Tensor(np.full((1, IMAGE_SIZE, IMAGE_SIZE), 255.0)))
    assert out.shape == (3, IMAGE_SIZE, IMAGE_SIZE)
    assert np.all(out.numpy() == 1.0)


def test_constant_black() -> None:
    out = preprocess(Tensor(np.zeros((3, 100, 80))))
    assert out.shape == (3, IMAGE_SIZE, IMAGE_SIZE)
    assert np.all(out.numpy() == 0.0)


def test_checkerboard_matches_bilinear_oracle() -> None:
    board = np.array([[0.0, 255.0], [255.0, 0.0]])
    out = preprocess(Tensor(board[np.newaxis]), size=4).numpy()

    expected = bilinear_oracle(board / 255.0, 4, 4)
    # Clamped half-pixel coordinates are 0, 0.25, 0.75, 1 along each axis
    assert expected[0].tolist() == pytest.approx([0.0, 0.25, 0.75, 1.0])
    for channel in out:
        assert np.allclose(channel, expected, atol=1e-9)


def test_resize_matches_oracle_on_random_images() -> None:
    rng = np.random.default_rng(2)
    for in_size, out_size in (((3, 5), (7, 4)), ((8, 8), (3, 3)), ((6, 2), (12, 9))):
        image = rng.uniform(size=in_size)
        resized = resize_bilinear(image[np.newaxis], *out_size)[0]
        assert np.allclose(resized, bilinear_oracle(image, *out_size), atol=1e-9)


def test_preprocess_output_range() -> None:
    rng = np.random.default_rng(0)
    image = Tensor(rng.integers(0, 256, size=(3, 40, 50)).astype(np.float64))

    plain = preprocess(image, size=32).numpy()
    assert plain.min() >= 0.0 and plain.max() <= 1.0

    centred = preprocess(image, True, size=32, mean=(0.5, 0.4, 0.6)).numpy()
    assert centred.min() >= -1.0 and centred.max() <= 1.0
    assert np.allclose(centred, plain - np.array([0.5, 0.4, 0.6]).reshape(3, 1, 1))


def test_preprocess_errors() -> None:
    with pytest.raises(ArgumentError):
        preprocess(Tensor(np.zeros((1, 0, 5))))
    with pytest.raises(DimensionError):
        preprocess(Tensor(np.zeros((2, 5, 5))))
    with pytest.raises(DimensionError):
        preprocess(Tensor(np.zeros((5, 5))))
    with pytest.raises(ArgumentError):
        preprocess(Tensor(np.zeros((1, 5, 5))), True)


def test_sixteen_bit_scaling() -> None:
    out = preprocess(Tensor(np.full((1, 8, 8), 65535.0)), max_value=65535, size=8)
    assert np.all(out.numpy() == 1.0)


def test_sniff_format() -> None:
    gray = np.zeros((4, 4), dtype=np.uint8)
    assert sniff_format(png_bytes(gray)) is ImageFormat.PNG
    assert sniff_format(jpeg_bytes(gray)) is ImageFormat.JPEG
    assert sniff_format(emit_dicom_lite(gray)) is ImageFormat.DICOM

    with pytest.raises(FormatError) as excinfo:
        sniff_format(b"hello, this is plainly text")
    assert str(excinfo.value) == "unrecognized image format"


def test_decode_png_modes() -> None:
    gray = decode_image(png_bytes(np.full((3, 5), 7, dtype=np.uint8)))
    assert gray.pixels.shape == (1, 3, 5)
    assert gray.max_value == 255
    assert np.all(gray.pixels.numpy() == 7.0)

    rgb = np.zeros((3, 5, 3), dtype=np.uint8)
    rgb[..., 1] = 200
    colour = decode_image(png_bytes(rgb))
    assert colour.pixels.shape == (3, 3, 5)
    assert np.all(colour.pixels.numpy()[1] == 200.0)

    deep = decode_image(png_bytes(np.full((2, 2), 40000, dtype=np.uint16)))
    assert deep.max_value == 65535
    assert np.all(deep.pixels.numpy() == 40000.0)


def test_decode_jpeg() -> None:
    decoded = decode_image(jpeg_bytes(np.full((16, 16), 128, dtype=np.uint8)))
    assert decoded.format is ImageFormat.JPEG
    assert decoded.pixels.shape == (1, 16, 16)
    assert np.abs(decoded.pixels.numpy() - 128.0).max() <= 2.0


def test_decode_dicom() -> None:
    decoded = decode_image(emit_dicom_lite(np.array([[0, 1], [2, 3]], dtype=np.uint8)))
    assert decoded.format is ImageFormat.DICOM
    assert decoded.pixels.numpy().reshape(-1).tolist() == [0.0, 1.0, 2.0, 3.0]


def test_decode_corrupt_png() -> None:
    with pytest.raises(FormatError):
        decode_image(PNG_SIGNATURE + b"not really a png")


def test_decode_rejects_oversized_images(monkeypatch: pytest.MonkeyPatch) -> None:
    # Past Pillow's own decompression-bomb threshold
    with pytest.raises(FormatError):
        decode_image(png_header(20000, 20000))
    # Below it but past the decoded-pixel limit
    with pytest.raises(FormatError) as excinfo:
        decode_image(png_header(8000, 8000))
    assert "8000x8000" in str(excinfo.value)

    monkeypatch.setattr("covilearn.imaging.MAX_PIXELS", 63)
    with pytest.raises(FormatError):
        decode_image(png_bytes(np.zeros((8, 8), dtype=np.uint8)))
    with pytest.raises(FormatError):
        decode_image(emit_dicom_lite(np.zeros((8, 8), dtype=np.uint8)))
    assert decode_image(png_bytes(np.zeros((7, 9), dtype=np.uint8))).pixels.shape == (1, 7, 9)


def test_load_image_missing(tmp_path: Path) -> None:
    path = tmp_path / "absent.png"
    with pytest.raises(MissingFileError) as excinfo:
        load_image(path)
    assert excinfo.value.path == str(path)


def test_load_preprocessed(tmp_path: Path) -> None:
    path = tmp_path / "x.png"
    path.write_bytes(png_bytes(np.full((10, 12), 255, dtype=np.uint8)))
    out = load_preprocessed(path, size=16)
    assert out.shape == (3, 16, 16)
    assert np.allclose(out.numpy(), 1.0, atol=1e-12)


def test_dataset_mean() -> None:
    images = [Tensor(np.full((3, 2, 2), 0.2)), Tensor(np.full((3, 4, 4), 0.6))]
    assert dataset_mean(images) == pytest.approx((0.4, 0.4, 0.4))

    with pytest.raises(ArgumentError):
        dataset_mean([])
