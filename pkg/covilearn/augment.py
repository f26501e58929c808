"""
Label-preserving augmentations for preprocessed (3, H, W) images in [0, 1].

A draw produces `AugmentParams`; the default instance is the identity. Application order: flips,
random crop, one combined affine warp (rotation, shear, zoom, aspect, shift), contrast, brightness,
pixel jitter, clamp.
"""

from dataclasses import dataclass
import math

import numpy as np
from skimage.transform import AffineTransform, warp

from covilearn.config import AugmentPolicy
from covilearn.dataset import Sample
from covilearn.imaging import resize_bilinear
from covilearn.tensor import Tensor


@dataclass(frozen=True)
class AugmentParams:
    horizontal_flip: bool = False
    vertical_flip: bool = False
    crop_fraction: float = 1.0
    crop_offset: tuple[float, float] = (0.5, 0.5)
    rotation_degrees: float = 0.0
    shear_degrees: float = 0.0
    zoom: float = 1.0
    aspect: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)
    contrast: float = 1.0
    brightness: float = 0.0
    jitter: float = 0.0
    jitter_seed: int = 0


def draw_params(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentParams:
    """Every transform fires independently with `policy.probability`; inactive ones stay at identity."""

    def fires() -> bool:
        return bool(rng.random() < policy.probability)

    def symmetric(limit: float) -> float:
        return float(rng.uniform(-limit, limit)) if fires() else 0.0

    def within(bounds: tuple[float, float]) -> float:
        return float(rng.uniform(*bounds)) if fires() else 1.0

    hflip = policy.horizontal_flip and fires()
    vflip = policy.vertical_flip and fires()
    crop = within(policy.crop_range)
    crop_offset = (float(rng.random()), float(rng.random()))
    rotation = symmetric(policy.rotation_degrees)
    shear = symmetric(policy.shear_degrees)
    zoom = within(policy.zoom_range)
    aspect = within(policy.aspect_range)
    shift = (symmetric(policy.shift_fraction), symmetric(policy.shift_fraction))
    contrast = 1.0 + symmetric(policy.contrast)
    brightness = symmetric(policy.brightness)
    jitter = policy.jitter if fires() else 0.0
    return AugmentParams(
        horizontal_flip=hflip,
        vertical_flip=vflip,
        crop_fraction=crop,
        crop_offset=crop_offset,
        rotation_degrees=rotation,
        shear_degrees=shear,
        zoom=zoom,
        aspect=aspect,
        shift=shift,
        contrast=contrast,
        brightness=brightness,
        jitter=jitter,
        jitter_seed=int(rng.integers(0, 2**31)),
    )


def affine_matrix(params: AugmentParams, height: int, width: int) -> np.ndarray:
    """Homogeneous (x, y) map from input to output pixel coordinates, centred on the image."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    theta = math.radians(params.rotation_degrees)
    shear = math.radians(params.shear_degrees)
    sx = params.zoom * math.sqrt(params.aspect)
    sy = params.zoom / math.sqrt(params.aspect)

    to_origin = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    scale = np.diag([sx, sy, 1.0])
    shearing = np.array([[1.0, -math.sin(shear), 0.0], [0.0, math.cos(shear), 0.0], [0.0, 0.0, 1.0]])
    rotation = np.array(
        [[math.cos(theta), -math.sin(theta), 0.0], [math.sin(theta), math.cos(theta), 0.0], [0.0, 0.0, 1.0]]
    )
    back = np.array([[1.0, 0.0, cx + params.shift[0] * width], [0.0, 1.0, cy + params.shift[1] * height], [0.0, 0.0, 1.0]])
    return back @ rotation @ shearing @ scale @ to_origin


def _crop(pixels: np.ndarray, fraction: float, offset: tuple[float, float]) -> np.ndarray:
    _, height, width = pixels.shape
    crop_h = max(1, round(fraction * height))
    crop_w = max(1, round(fraction * width))
    if (crop_h, crop_w) == (height, width):
        return pixels
    top = int(offset[0] * (height - crop_h))
    left = int(offset[1] * (width - crop_w))
    return resize_bilinear(pixels[:, top : top + crop_h, left : left + crop_w], height, width)


def apply_augmentation(pixels: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = pixels
    if params.horizontal_flip:
        out = out[:, :, ::-1]
    if params.vertical_flip:
        out = out[:, ::-1, :]
    # warp needs a writable buffer; Tensor storage is read-only
    out = np.array(_crop(out, params.crop_fraction, params.crop_offset))

    _, height, width = out.shape
    matrix = affine_matrix(params, height, width)
    if not np.array_equal(matrix, np.eye(3)):
        inverse = AffineTransform(matrix=matrix).inverse
        out = np.stack([warp(channel, inverse, order=1, mode="edge", preserve_range=True) for channel in out])

    if params.contrast != 1.0:
        centre = out.mean(axis=(1, 2), keepdims=True)
        out = (out - centre) * params.contrast + centre
    if params.brightness != 0.0:
        out = out + params.brightness
    if params.jitter > 0.0:
        noise = np.random.default_rng(params.jitter_seed).uniform(-params.jitter, params.jitter, size=out.shape)
        out = out + noise
    return np.clip(out, 0.0, 1.0)


def augment(sample: Sample, policy: AugmentPolicy, seed: int) -> Sample:
    params = draw_params(policy, np.random.default_rng(seed))
    return Sample(Tensor.wrap(apply_augmentation(sample.pixels.numpy(), params)), sample.label)
