"""Image loading and saving for dataset references."""
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import as_image_array
from .errors import DataError, ShapeError


def load_image(path):
    path = Path(path)
    try:
        if path.suffix.lower() == ".npy":
            return as_image_array(np.load(path))
        with Image.open(path) as im:
            return as_image_array(np.asarray(im.convert("RGB")))
    except (OSError, ValueError, ShapeError) as exc:
        raise DataError(f"cannot load image {path}: {exc}") from exc


def save_png(path, pixels):
    """Write a [0, 1] float image as 8-bit lossless PNG."""
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


class DirectoryImageStore:
    """References are paths relative to ``root``; decoded images are cached."""

    def __init__(self, root, cache=True):
        self.root = Path(root)
        self._cache = {} if cache else None

    def __getitem__(self, ref):
        if self._cache is not None and ref in self._cache:
            return self._cache[ref]
        img = load_image(self.root / ref)
        if self._cache is not None:
            self._cache[ref] = img
        return img

    def __contains__(self, ref):
        return (self.root / ref).is_file()


class MemoryImageStore(dict):
    """Plain mapping of reference to pixel array."""

    def __missing__(self, ref):
        raise DataError(f"unknown image reference {ref!r}")


def stack(store, refs):
    return np.stack([store[r] for r in refs]).astype(np.float32, copy=False)
