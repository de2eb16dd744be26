"""Synthetic resolution degradation.

An image is shrunk to ``r x r`` and enlarged back to 112 x 112 with Pillow's
bicubic filter. Pillow widens the kernel support by the scale factor when
downscaling, which is its anti-aliasing; the filter is Keys' cubic with
``a = -0.5`` (Catmull-Rom). Channels are resampled independently in 32-bit
float mode so no 8-bit quantisation happens in between.
"""
from dataclasses import dataclass, field

import numpy as np
import PIL
from PIL import Image

from .errors import DomainError, ShapeError

IMAGE_SIZE = 112
TRAIN_RESOLUTIONS = (7, 14, 28)
EVAL_RESOLUTIONS = (7, 14, 28, 56, 112)

KERNEL_DESCRIPTION = (
    f"Pillow {PIL.__version__} Image.BICUBIC (Keys a=-0.5), support scaled by the "
    "downscale factor (anti-aliasing), per-channel float32, clamp [0,1]"
)


@dataclass
class FaceImage:
    """A 112 x 112 x 3 float image in ``[0, 1]`` and its effective resolution."""

    pixels: np.ndarray
    resolution: int = IMAGE_SIZE

    def __post_init__(self):
        self.pixels = as_image_array(self.pixels)


def as_image_array(pixels):
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = np.asarray(arr, dtype=np.float32)
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got {arr.shape}")
    return arr


def _resize_channels(arr, size):
    out = np.empty((size, size, arr.shape[2]), dtype=np.float32)
    for c in range(arr.shape[2]):
        ch = Image.fromarray(np.ascontiguousarray(arr[:, :, c]))
        out[:, :, c] = np.asarray(ch.resize((size, size), Image.BICUBIC))
    return out


def degrade_pixels(pixels, r):
    """Down-sample to ``r`` and back up; ``r == 112`` returns an exact copy."""
    r = int(r)
    if not 2 <= r <= IMAGE_SIZE:
        raise DomainError(f"resolution must lie in [2, {IMAGE_SIZE}], got {r}")
    arr = as_image_array(pixels)
    if r == IMAGE_SIZE:
        return arr.copy()
    small = _resize_channels(arr, r)
    out = _resize_channels(small, IMAGE_SIZE)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def degrade_image(img, r):
    pixels = img.pixels if isinstance(img, FaceImage) else img
    return FaceImage(degrade_pixels(pixels, r), int(r))


@dataclass
class ResolutionSampler:
    """Uniform per-image draws from a fixed set of resolutions.

    Draw ``i`` of call ``k`` comes from its own generator seeded by
    ``(seed, k, i)``, so batches can be degraded in any order or in parallel
    and still agree.
    """

    choices: tuple = TRAIN_RESOLUTIONS
    seed: int = 0
    calls: int = field(default=0, compare=False)

    def __post_init__(self):
        self.choices = tuple(sorted({int(c) for c in self.choices}))
        if not self.choices:
            raise DomainError("resolution sampler needs at least one choice")
        bad = [c for c in self.choices if not 2 <= c <= IMAGE_SIZE]
        if bad:
            raise DomainError(f"resolutions out of range [2, {IMAGE_SIZE}]: {bad}")

    def draw(self, n):
        key = self.calls
        self.calls += 1
        return [self.resolution_for(key, i) for i in range(n)]

    def resolution_for(self, call, index):
        if len(self.choices) == 1:
            return self.choices[0]
        rng = np.random.default_rng([self.seed, call, index])
        return self.choices[int(rng.integers(len(self.choices)))]


def degrade_batch(images, sampler):
    """One degraded counterpart per input image, order-aligned."""
    images = list(images)
    if not images:
        raise DomainError("cannot degrade an empty batch")
    return [degrade_image(img, r) for img, r in zip(images, sampler.draw(len(images)))]


def mean_abs_laplacian(pixels):
    """Mean absolute 4-neighbour Laplacian over the interior, all channels."""
    x = np.asarray(pixels, dtype=np.float64)
    lap = (x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:] - 4.0 * x[1:-1, 1:-1])
    return float(np.mean(np.abs(lap)))
