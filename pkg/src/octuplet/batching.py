"""Epoch-wise two-images-per-identity mini-batch construction.

Identities are drawn for each batch without replacement, with probability
proportional to their number of still unpicked images. The counts are
decremented once a batch is emitted, so late batches of an epoch still mix
many identities.
"""
import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff", ".npy")


@dataclass
class IdentityPool:
    """Image references grouped by identity, with this epoch's unpicked subset."""

    images: dict
    unpicked: dict = field(default=None)

    def __post_init__(self):
        self.images = {k: list(v) for k, v in self.images.items()}
        if self.unpicked is None:
            self.reset()

    def reset(self):
        self.unpicked = {k: list(v) for k, v in self.images.items()}

    @property
    def identities(self):
        return sorted(self.images)

    def counts(self):
        return {k: len(self.unpicked[k]) for k in self.identities}

    def eligible(self):
        return [k for k in self.identities if len(self.unpicked[k]) >= 2]

    def __len__(self):
        return sum(len(v) for v in self.images.values())

    def label_of(self):
        return {ref: ident for ident, refs in self.images.items() for ref in refs}

    def subset(self, identities):
        return IdentityPool({k: self.images[k] for k in identities})


@dataclass
class Batch:
    refs: list
    labels: list

    def __len__(self):
        return len(self.refs)


def draw_identities(rng, identities, counts, k):
    """Weighted sampling of ``k`` identities without replacement.

    Uses exponential keys: the identity with the smallest ``E_i / w_i`` is the
    first draw, which happens with probability ``w_i / sum(w)``; the rest
    follow in sequential-draw order.
    """
    w = np.asarray(counts, dtype=np.float64)
    keys = rng.exponential(size=len(w)) / w
    order = np.argsort(keys, kind="stable")[:k]
    return [identities[i] for i in order]


def _check_batch_size(B):
    if B <= 0 or B % 2:
        raise ConfigError(f"batch size must be a positive even number, got {B}")


def build_epoch_batches(pool, B, seed, max_batches=None):
    """Every batch of one epoch, in order.

    The pool is reset first and left holding the epoch's leftovers. The epoch
    ends once fewer than ``B / 2`` identities have two unpicked images.
    """
    _check_batch_size(B)
    k = B // 2
    pool.reset()
    if len(pool.eligible()) < k:
        raise ConfigError(
            f"batch size {B} needs {k} identities with >= 2 images, pool has {len(pool.eligible())}"
        )
    rng = np.random.default_rng(seed)
    batches = []
    while max_batches is None or len(batches) < max_batches:
        eligible = pool.eligible()
        if len(eligible) < k:
            break
        weights = [len(pool.unpicked[i]) for i in eligible]
        chosen = draw_identities(rng, eligible, weights, k)
        refs, labels = [], []
        for ident in chosen:
            remaining = pool.unpicked[ident]
            picks = rng.choice(len(remaining), size=2, replace=False)
            refs.extend(remaining[j] for j in picks)
            labels.extend([ident, ident])
        for ident, ref in zip(labels, refs):
            pool.unpicked[ident].remove(ref)
        batches.append(Batch(refs, labels))
    return batches


def remaining_capacity(pool, B):
    """Largest number of further full batches under the exactly-twice rule.

    With ``c_i`` the number of image pairs left for identity ``i`` and
    ``k = B / 2``, ``t`` batches fit iff ``sum_i min(c_i, t) >= k * t``.
    """
    _check_batch_size(B)
    k = B // 2
    caps = np.array([len(v) // 2 for v in pool.unpicked.values()], dtype=np.int64)
    if (caps > 0).sum() < k:
        return 0
    lo, hi = 0, int(caps.sum()) // k
    while lo < hi:
        t = (lo + hi + 1) // 2
        if np.minimum(caps, t).sum() >= k * t:
            lo = t
        else:
            hi = t - 1
    return lo


def scan_dataset(root, manifest=None):
    """Build a pool from one-directory-per-identity, or from a TSV manifest.

    The manifest holds ``identity<TAB>relative/path`` lines (an optional
    header starting with ``identity`` is skipped). References are paths
    relative to ``root``, with forward slashes.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    images = {}
    if manifest is not None:
        try:
            with open(manifest, newline="") as fh:
                for row in csv.reader(fh, delimiter="\t"):
                    if not row or row[0].startswith("#") or row[0] == "identity":
                        continue
                    if len(row) < 2:
                        raise DataError(f"malformed manifest line: {row!r}")
                    images.setdefault(row[0], []).append(row[1])
        except OSError as exc:
            raise DataError(f"cannot read manifest {manifest}: {exc}") from exc
    else:
        for ident in sorted(os.listdir(root)):
            d = root / ident
            if not d.is_dir():
                continue
            files = sorted(f for f in os.listdir(d) if f.lower().endswith(IMAGE_SUFFIXES))
            if files:
                images[ident] = [f"{ident}/{f}" for f in files]
    if not images:
        raise DataError(f"no identity images found under {root}")
    return IdentityPool(images)
