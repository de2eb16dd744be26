"""Triplet enumeration and the hinge triplet loss (numpy reference path)."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .coremath import DistanceMetric, distance_gradients
from .errors import ShapeError


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class LabeledBatch:
    """Embeddings (one per row) with an identity label per row."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim == 1:
            self.embeddings = self.embeddings[:, None]
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2:
            raise ShapeError("embeddings must be a 2-D array")
        if len(self.labels) != len(self.embeddings):
            raise ShapeError(
                f"{len(self.embeddings)} embeddings but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_labels(cls, labels, dim=1):
        """A batch carrying only labels, for pure index bookkeeping."""
        return cls(np.zeros((len(labels), dim)), labels)


def enumerate_triplets(anchors, positives, negatives, same_source=False):
    """All ``(a, p, n)`` with ``id(a) == id(p)`` and ``id(a) != id(n)``.

    With ``same_source`` the anchor and positive batches are the same
    underlying images, so ``a == p`` (by index) is excluded as well.
    Returned in lexicographic order.
    """
    la = np.asarray(anchors.labels)
    lp = np.asarray(positives.labels)
    ln = np.asarray(negatives.labels)
    pos = la[:, None] == lp[None, :]
    if same_source:
        if len(la) != len(lp):
            raise ShapeError("same_source requires anchor and positive batches of equal size")
        np.fill_diagonal(pos, False)
    neg = la[:, None] != ln[None, :]
    a, p, n = np.nonzero(pos[:, :, None] & neg[:, None, :])
    return [Triplet(int(i), int(j), int(k)) for i, j, k in zip(a, p, n)]


def _triplet_index_arrays(triplets, sizes):
    if len(triplets) == 0:
        return None
    idx = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    for col, (size, role) in enumerate(zip(sizes, ("anchor", "positive", "negative"))):
        if idx[:, col].min() < 0 or idx[:, col].max() >= size:
            raise ShapeError(f"{role} index out of range for batch of size {size}")
    return idx


def triplet_loss(triplets, anchors, positives, negatives, metric="euclidean",
                 margin=0.0, normalize=False, return_grad=False):
    """Mean hinge ``[d(a, p) - d(a, n) + m]_+`` over the supplied triplets.

    An empty triplet set gives a loss of 0. With ``return_grad`` the result is
    ``(loss, (grad_anchors, grad_positives, grad_negatives))``, one gradient
    array per role batch; callers whose roles share a batch add them up. At
    the hinge kink the inactive branch (zero gradient) is used.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    metric = DistanceMetric.parse(metric)
    A = anchors.embeddings
    P = positives.embeddings
    N = negatives.embeddings
    idx = _triplet_index_arrays(triplets, (len(A), len(P), len(N)))
    if idx is None:
        if return_grad:
            return 0.0, (np.zeros_like(A), np.zeros_like(P), np.zeros_like(N))
        return 0.0

    a, p, n = idx[:, 0], idx[:, 1], idx[:, 2]
    d_ap, g_ap_a, g_ap_p = distance_gradients(A[a], P[p], metric, normalize)
    d_an, g_an_a, g_an_n = distance_gradients(A[a], N[n], metric, normalize)
    hinge = d_ap - d_an + margin
    active = hinge > 0.0
    count = len(idx)
    loss = float(np.sum(np.where(active, hinge, 0.0)) / count)
    if not return_grad:
        return loss

    w = (active / count)[:, None]
    gA = np.zeros_like(A)
    gP = np.zeros_like(P)
    gN = np.zeros_like(N)
    np.add.at(gA, a, w * (g_ap_a - g_an_a))
    np.add.at(gP, p, w * g_ap_p)
    np.add.at(gN, n, -w * g_an_n)
    return loss, (gA, gP, gN)
