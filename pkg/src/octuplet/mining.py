"""Batch-hard negative mining.

For every anchor only the closest different-identity sample of the negative
pool is kept, which reduces the ``B**2 - 2B`` triplets of a two-per-identity
batch to ``B``.
"""
import numpy as np

from ._accel import USE_NUMBA, njit
from .coremath import pairwise_distances
from .errors import DomainError, ProtocolError
from .triplet import Triplet


def encode_labels(*label_arrays):
    """Map arbitrary hashable labels onto shared dense int64 codes."""
    arrays = [np.asarray(x) for x in label_arrays]
    _, inverse = np.unique(np.concatenate(arrays), return_inverse=True)
    out, start = [], 0
    for x in arrays:
        out.append(inverse[start:start + len(x)].astype(np.int64))
        start += len(x)
    return out


@njit
def _row_hardest_kernel(D, anchor_codes, pool_codes):
    out = np.full(D.shape[0], -1, dtype=np.int64)
    for i in range(D.shape[0]):
        best = np.inf
        for j in range(D.shape[1]):
            if pool_codes[j] != anchor_codes[i] and (out[i] < 0 or D[i, j] < best):
                best = D[i, j]
                out[i] = j
    return out


def _row_hardest_numpy(D, anchor_codes, pool_codes):
    valid = anchor_codes[:, None] != pool_codes[None, :]
    masked = np.where(valid, D, np.inf)
    out = np.argmin(masked, axis=1).astype(np.int64)
    out[~valid.any(axis=1)] = -1
    return out


def hardest_negatives_from_distances(D, anchor_labels, pool_labels):
    """Column index of the smallest valid entry in every row of ``D``.

    A column is valid when its label differs from the row's label. Ties go
    to the lowest index; rows without a valid column get ``-1``.
    """
    a_codes, p_codes = encode_labels(anchor_labels, pool_labels)
    D = np.ascontiguousarray(D, dtype=np.float64)
    if USE_NUMBA:
        return _row_hardest_kernel(D, a_codes, p_codes)
    return _row_hardest_numpy(D, a_codes, p_codes)


def hardest_negative(anchor_index, anchor_batch, negative_pool, metric="euclidean",
                     normalize=False):
    """Index into ``negative_pool`` of the hardest negative for one anchor."""
    anchor = anchor_batch.embeddings[anchor_index]
    D = pairwise_distances(anchor, negative_pool.embeddings, metric, normalize)
    label = np.asarray(anchor_batch.labels)[anchor_index:anchor_index + 1]
    j = int(hardest_negatives_from_distances(D, label, negative_pool.labels)[0])
    if j < 0:
        raise DomainError(f"anchor {anchor_index} has no negative of a different identity")
    return j


def positive_partners(anchor_labels, positive_labels, same_source):
    """The unique positive index for every anchor.

    Raises :class:`ProtocolError` when an anchor has no partner or more than one.
    """
    la = np.asarray(anchor_labels)
    lp = np.asarray(positive_labels)
    match = la[:, None] == lp[None, :]
    if same_source:
        if len(la) != len(lp):
            raise ProtocolError("same_source batches must have equal size")
        np.fill_diagonal(match, False)
    counts = match.sum(axis=1)
    bad = np.flatnonzero(counts != 1)
    if len(bad):
        i = int(bad[0])
        raise ProtocolError(
            f"anchor {i} (label {la[i]!r}) has {int(counts[i])} positive partners, expected exactly 1"
        )
    return np.argmax(match, axis=1)


def mine_triplet_set(anchors, positives, negative_pool, metric="euclidean",
                     normalize=False, same_source=False, distances=None):
    """One triplet per anchor: its unique positive and its hardest negative.

    ``distances`` may carry a precomputed anchor-vs-pool matrix under the
    same metric and normalisation.
    """
    partners = positive_partners(anchors.labels, positives.labels, same_source)
    if distances is None:
        distances = pairwise_distances(anchors.embeddings, negative_pool.embeddings,
                                       metric, normalize)
    negs = hardest_negatives_from_distances(distances, anchors.labels, negative_pool.labels)
    missing = np.flatnonzero(negs < 0)
    if len(missing):
        raise DomainError(f"anchor {int(missing[0])} has no negative of a different identity")
    return [Triplet(i, int(p), int(n)) for i, (p, n) in enumerate(zip(partners, negs))]
