"""Differentiable octuplet loss for torch feature extractors.

Mining runs on detached embeddings through the numpy kernels; only the
selected triplets' distances carry gradient.
"""
import numpy as np
import torch

from .coremath import DistanceMetric
from .errors import DomainError
from .octuplet import PairedBatch, TermMask, build_octuplet_sets


def rowwise_distance(x, y, metric="euclidean", normalize=False):
    """``d(x[i], y[i])`` for every row, differentiable.

    The euclidean gradient at zero distance is 0 rather than NaN.
    """
    metric = DistanceMetric.parse(metric)
    if normalize or metric is DistanceMetric.COSINE:
        nx = x.norm(dim=1)
        ny = y.norm(dim=1)
        if bool((nx == 0).any()) or bool((ny == 0).any()):
            raise DomainError("zero-norm embedding under cosine distance or normalisation")
        if normalize:
            x = x / nx[:, None]
            y = y / ny[:, None]
            nx = ny = None
    if metric is DistanceMetric.COSINE:
        if nx is None:
            nx, ny = x.norm(dim=1), y.norm(dim=1)
        return 1.0 - (x * y).sum(dim=1) / (nx * ny)
    sq = ((x - y) ** 2).sum(dim=1)
    if metric is DistanceMetric.SQUARED_EUCLIDEAN:
        return sq
    # test for exact zero so that NaN propagates instead of reading as distance 0
    zero = sq == 0
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))


def triplet_loss_torch(anchors, pool, triplets, metric, margin, normalize):
    if not triplets:
        return anchors.sum() * 0.0
    idx = torch.as_tensor(np.asarray(triplets, dtype=np.int64), device=anchors.device)
    a = anchors[idx[:, 0]]
    d_ap = rowwise_distance(a, pool[idx[:, 1]], metric, normalize)
    d_an = rowwise_distance(a, pool[idx[:, 2]], metric, normalize)
    return torch.clamp(d_ap - d_an + margin, min=0.0).mean()


def octuplet_loss_torch(hr, lr, labels, metric="euclidean", margin=25.0,
                        normalize=False, mask=None):
    """Masked octuplet loss of one shared forward pass.

    Parameters
    ----------
    hr, lr : torch.Tensor
        ``(B, d)`` embeddings of the original and the degraded images.
    labels : array_like
        Identity of row ``i`` in both halves.

    Returns
    -------
    total : torch.Tensor
        Scalar loss (sum of the active terms).
    terms : dict
        Term name to scalar tensor, active terms only.
    """
    mask = TermMask() if mask is None else TermMask.parse(mask)
    batch = PairedBatch(hr.detach().cpu().double().numpy(),
                        lr.detach().cpu().double().numpy(),
                        np.asarray(labels))
    sets = build_octuplet_sets(batch, metric, normalize, mask)
    side = {"h": hr, "l": lr}
    terms = {}
    for term in mask.terms:
        terms[term] = triplet_loss_torch(side[term[0]], side[term[1]], getattr(sets, term),
                                         metric, margin, normalize)
    total = sum(terms.values())
    return total, terms


class OctupletLoss(torch.nn.Module):
    def __init__(self, metric="euclidean", margin=25.0, normalize=False, mask=None):
        super().__init__()
        self.metric = DistanceMetric.parse(metric)
        self.margin = float(margin)
        self.normalize = bool(normalize)
        self.mask = TermMask() if mask is None else TermMask.parse(mask)

    def forward(self, hr, lr, labels):
        return octuplet_loss_torch(hr, lr, labels, self.metric, self.margin,
                                   self.normalize, self.mask)
