"""
Image decoding and the preprocessing chain: decode -> divide by the format maximum -> bilinear resize
-> optional per-channel mean subtraction.

PNG and JPEG go through Pillow; DICOM-lite through `covilearn.dicom`. Formats are recognized by
their leading bytes, never by file name.
"""

from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum
import io
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from skimage.transform import resize

from covilearn.dicom import MAGIC as DICOM_MAGIC
from covilearn.dicom import PREAMBLE_LENGTH, parse_dicom_lite
from covilearn.errors import ArgumentError, DimensionError, FormatError, MissingFileError
from covilearn.tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_SIZE = 224
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
JPEG_SIGNATURE = b"\xff\xd8\xff"
# Largest decoded image accepted, in pixels per channel
MAX_PIXELS = 40_000_000


class ImageFormat(Enum):
    PNG = "png"
    JPEG = "jpeg"
    DICOM = "dicom"


def sniff_format(data: bytes) -> ImageFormat:
    if data.startswith(PNG_SIGNATURE):
        return ImageFormat.PNG
    if data.startswith(JPEG_SIGNATURE):
        return ImageFormat.JPEG
    if data[PREAMBLE_LENGTH : PREAMBLE_LENGTH + len(DICOM_MAGIC)] == DICOM_MAGIC:
        return ImageFormat.DICOM
    raise FormatError("unrecognized image format")


@dataclass(frozen=True)
class RawImage:
    """Decoded pixels (C, H, W) in their stored range [0, max_value]."""

    pixels: Tensor
    max_value: int
    format: ImageFormat

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]


def _check_extent(width: int, height: int) -> None:
    if width * height > MAX_PIXELS:
        raise FormatError(f"image of {width}x{height} pixels exceeds the limit of {MAX_PIXELS}")


def _from_pillow(data: bytes, kind: ImageFormat) -> RawImage:
    try:
        with Image.open(io.BytesIO(data)) as image:
            _check_extent(*image.size)
            image.load()
            mode = image.mode
            if mode in ("I;16", "I;16L", "I;16B", "I"):
                array = np.asarray(image, dtype=np.float64)
                max_value = 65535
            elif mode in ("1", "L", "LA", "La"):
                array = np.asarray(image.convert("L"), dtype=np.float64)
                max_value = 255
            else:
                array = np.asarray(image.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
                max_value = 255
    except (UnidentifiedImageError, Image.DecompressionBombError, OSError, SyntaxError) as e:
        raise FormatError(f"cannot decode {kind.value} image: {e}") from e
    if array.ndim == 2:
        array = array[np.newaxis]
    return RawImage(Tensor.wrap(array), max_value, kind)


def decode_image(data: bytes) -> RawImage:
    kind = sniff_format(data)
    if kind is ImageFormat.DICOM:
        dicom = parse_dicom_lite(data)
        _check_extent(dicom.columns, dicom.rows)
        pixels = dicom.pixels().astype(np.float64)[np.newaxis]
        return RawImage(Tensor.wrap(pixels), dicom.max_value, kind)
    return _from_pillow(data, kind)


def load_image(path: Path) -> RawImage:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(path) from None
    return decode_image(data)


def resize_bilinear(channels: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Per-channel bilinear resize of (C, H, W). Half-pixel centres (align-corners false); samples
    outside the image clamp to the nearest edge pixel.
    """
    if channels.shape[1:] == (height, width):
        return channels.copy()
    return np.stack(
        [
            resize(channel, (height, width), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
            for channel in channels
        ]
    )


def preprocess(
    image: Tensor,
    subtract_mean: bool = False,
    *,
    max_value: float = 255,
    size: int = IMAGE_SIZE,
    mean: tuple[float, float, float] | None = None,
) -> Tensor:
    """
    Raw (C, H, W) pixels -> (3, size, size) network input.

    Grayscale is replicated to three channels. With `subtract_mean`, `mean` holds the per-channel
    dataset mean computed on the scaled, resized images.
    """
    if image.ndim != 3:
        raise DimensionError(f"image must be (C, H, W), got {image.shape}")
    channels, height, width = image.shape
    if channels == 0 or height == 0 or width == 0:
        raise ArgumentError(f"image has a zero-sized extent: {image.shape}")
    if channels not in (1, 3):
        raise DimensionError(f"image must have 1 or 3 channels, got {channels}")
    if max_value <= 0:
        raise ArgumentError(f"max_value must be positive, got {max_value}")

    scaled = image.numpy() / max_value
    if channels == 1:
        scaled = np.repeat(scaled, 3, axis=0)
    out = np.clip(resize_bilinear(scaled, size, size), 0.0, 1.0)
    if subtract_mean:
        if mean is None:
            raise ArgumentError("mean subtraction requested without a dataset mean")
        out = out - np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    return Tensor.wrap(out)


def dataset_mean(images: Iterable[Tensor]) -> tuple[float, float, float]:
    """Per-channel mean over preprocessed (3, H, W) images, each image weighted equally."""
    total = np.zeros(3)
    count = 0
    for image in images:
        total += image.numpy().reshape(3, -1).mean(axis=1)
        count += 1
    if count == 0:
        raise ArgumentError("cannot compute the mean of an empty image set")
    r, g, b = (total / count).tolist()
    return (r, g, b)


def load_preprocessed(path: Path, *, size: int = IMAGE_SIZE) -> Tensor:
    raw = load_image(path)
    return preprocess(raw.pixels, max_value=raw.max_value, size=size)
