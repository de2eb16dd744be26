"""The four resolution-crossed triplet sets and their summed loss.

Notation: ``h`` is the high-resolution half of a paired batch and ``l`` its
degraded counterpart, index-aligned. Each set is named by the resolution of
its anchor and of its positive/negative pool:

========  ========  =================
set       anchors   positives / pool
========  ========  =================
``hh``    HR        HR
``hl``    HR        LR
``lh``    LR        HR
``ll``    LR        LR
========  ========  =================

In every set the positive is the index partner of the anchor (the other image
of the same identity) taken from the positive/pool side, so the cross sets
pair ``A`` with ``P↓`` and ``A↓`` with ``P``.
"""
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .coremath import DistanceMetric
from .errors import ProtocolError, ShapeError
from .mining import mine_triplet_set
from .triplet import LabeledBatch, triplet_loss

TERMS = ("hh", "hl", "lh", "ll")


@dataclass(frozen=True)
class TermMask:
    hh: bool = True
    hl: bool = True
    lh: bool = True
    ll: bool = True

    @classmethod
    def parse(cls, value):
        """Accept a mask, an iterable of term names or ``"hh,hl,lh,ll"``.

        ``"all"`` and ``"full"`` select every term.
        """
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            if value.strip().lower() in ("all", "full", "octuplet"):
                return cls()
            names = [v.strip().lower() for v in value.replace("+", ",").split(",") if v.strip()]
        else:
            names = [str(v).strip().lower() for v in value]
        aliases = {"h": "hh", "l": "ll"}
        names = [aliases.get(n, n) for n in names]
        unknown = set(names) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}; expected a subset of {TERMS}")
        mask = cls(**{t: t in names for t in TERMS})
        if not mask.any():
            raise ValueError("term mask selects no loss term")
        return mask

    @property
    def terms(self):
        return tuple(t for t in TERMS if getattr(self, t))

    def any(self):
        return bool(self.terms)

    def __str__(self):
        return ",".join(self.terms)

    def __or__(self, other):
        return TermMask(*(getattr(self, t) or getattr(other, t) for t in TERMS))

    def disjoint(self, other):
        return not set(self.terms) & set(other.terms)


# Rows of the loss-term ablation, full octuplet first.
ABLATION_MASKS = tuple(TermMask.parse(m) for m in (
    "hh,hl,lh,ll",
    "hh", "hl", "lh", "ll",
    "hh,hl", "hh,lh", "hh,ll", "hl,lh",
    "hh,hl,lh", "hh,hl,ll", "hh,lh,ll", "hl,lh,ll",
))


@dataclass
class PairedBatch:
    """``B`` high-resolution embeddings and their ``B`` degraded counterparts."""

    hr: np.ndarray
    lr: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.hr = np.asarray(self.hr, dtype=np.float64)
        self.lr = np.asarray(self.lr, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.hr.shape != self.lr.shape or self.hr.ndim != 2:
            raise ShapeError(f"hr {self.hr.shape} and lr {self.lr.shape} must be equal 2-D shapes")
        if len(self.labels) != len(self.hr):
            raise ShapeError("one label per embedding row is required")

    def __len__(self):
        return len(self.labels)

    def validate(self):
        if len(self) < 4:
            raise ProtocolError(f"paired batch needs B >= 4, got {len(self)}")
        counts = Counter(self.labels.tolist())
        odd = [k for k, c in counts.items() if c != 2]
        if odd:
            raise ProtocolError(
                f"every identity must appear exactly twice; {odd[0]!r} appears {counts[odd[0]]} times"
            )

    @property
    def hr_batch(self):
        return LabeledBatch(self.hr, self.labels)

    @property
    def lr_batch(self):
        return LabeledBatch(self.lr, self.labels)

    def roles(self, term):
        """``(anchor batch, positive/negative batch)`` for one of the four sets."""
        side = {"h": self.hr_batch, "l": self.lr_batch}
        return side[term[0]], side[term[1]]


class OctupletSets(NamedTuple):
    hh: list
    hl: list
    lh: list
    ll: list


def build_octuplet_sets(batch, metric="euclidean", normalize=False, mask=None):
    """Mine the four triplet sets of a paired batch.

    Each set holds exactly ``B`` triplets; mining runs separately per set over
    that set's own negative pool. Terms switched off in ``mask`` come back as
    empty lists.
    """
    batch.validate()
    mask = TermMask() if mask is None else TermMask.parse(mask)
    metric = DistanceMetric.parse(metric)
    sets = {}
    for term in TERMS:
        if not getattr(mask, term):
            sets[term] = []
            continue
        anchors, pool = batch.roles(term)
        sets[term] = mine_triplet_set(anchors, pool, pool, metric, normalize, same_source=True)
    return OctupletSets(**sets)


def octuplet_terms(batch, metric="euclidean", margin=25.0, normalize=False, mask=None):
    """Per-term triplet losses as a dict; masked-out terms are omitted."""
    mask = TermMask() if mask is None else TermMask.parse(mask)
    sets = build_octuplet_sets(batch, metric, normalize, mask)
    out = {}
    for term in mask.terms:
        anchors, pool = batch.roles(term)
        out[term] = triplet_loss(getattr(sets, term), anchors, pool, pool, metric, margin, normalize)
    return out


def octuplet_loss(batch, metric="euclidean", margin=25.0, normalize=False, mask=None):
    """Sum of the masked triplet losses; the full mask gives the octuplet loss."""
    return float(sum(octuplet_terms(batch, metric, margin, normalize, mask).values()))

