"""Distance metrics, feature normalisation and pairwise distance matrices.

Scalar metrics and the matrix kernel share the same per-pair arithmetic, so
``pairwise_distances(A, B)[i, j]`` is bit-identical to the scalar metric
applied to ``(A[i], B[j])`` on either backend.
"""
from enum import Enum

import numpy as np

from ._accel import USE_NUMBA, njit
from .errors import DomainError, ShapeError


class DistanceMetric(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    SQUARED_EUCLIDEAN = "squared-euclidean"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown distance metric {value!r}; expected one of "
                f"{[m.value for m in cls]}"
            ) from None

    @property
    def code(self):
        return _CODES[self]


_ALIASES = {
    "cos": "cosine",
    "euc": "euclidean",
    "l2": "euclidean",
    "sqeuclidean": "squared-euclidean",
    "euclidean2": "squared-euclidean",
    "euclidean-squared": "squared-euclidean",
    "sq-euclidean": "squared-euclidean",
}
_CODES = {
    DistanceMetric.COSINE: 0,
    DistanceMetric.EUCLIDEAN: 1,
    DistanceMetric.SQUARED_EUCLIDEAN: 2,
}


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit
def _pair_kernel(a, b, code):
    if code == 0:
        dot = 0.0
        na = 0.0
        nb = 0.0
        for k in range(a.shape[0]):
            dot += a[k] * b[k]
            na += a[k] * a[k]
            nb += b[k] * b[k]
        d = 1.0 - dot / (np.sqrt(na) * np.sqrt(nb))
        return min(max(d, 0.0), 2.0)
    s = 0.0
    for k in range(a.shape[0]):
        t = a[k] - b[k]
        s += t * t
    if code == 1:
        return np.sqrt(s)
    return s


@njit
def _matrix_kernel(A, B, code):
    out = np.empty((A.shape[0], B.shape[0]), dtype=np.float64)
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            out[i, j] = _pair_kernel(A[i], B[j], code)
    return out


@njit
def _rowwise_kernel(X, Y, code):
    out = np.empty(X.shape[0], dtype=np.float64)
    for i in range(X.shape[0]):
        out[i] = _pair_kernel(X[i], Y[i], code)
    return out


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

_CHUNK_ELEMENTS = 1 << 22


def _matrix_numpy(A, B, code, rowwise=False):
    # rowwise: A and B are (n, 1, d) and only the diagonal pairs are measured
    n, m, d = A.shape[0], B.shape[0], A.shape[-1]
    out = np.empty(n if rowwise else (n, m), dtype=np.float64)
    step = max(1, _CHUNK_ELEMENTS // max(1, (1 if rowwise else m) * d))
    for start in range(0, n, step):
        if rowwise:
            a = A[start:start + step]
            b = B[start:start + step]
        else:
            a = A[start:start + step, None, :]
            b = B[None, :, :]
        if code == 0:
            dot = np.sum(a * b, axis=-1)
            na = np.sum(a * a, axis=-1)
            nb = np.sum(b * b, axis=-1)
            block = 1.0 - dot / (np.sqrt(na) * np.sqrt(nb))
            np.clip(block, 0.0, 2.0, out=block)
        else:
            diff = a - b
            block = np.sum(diff * diff, axis=-1)
            if code == 1:
                block = np.sqrt(block)
        out[start:start + step] = block[:, 0] if rowwise else block
    return out


def _as_matrix(X, name):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ShapeError(f"{name} must be a vector or a 2-D stack of vectors, got shape {X.shape}")
    if X.shape[1] == 0:
        raise ShapeError(f"{name} has zero-dimensional embeddings")
    return np.ascontiguousarray(X)


def _check_nonzero(X, name):
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(norms == 0.0):
        raise DomainError(f"{name} contains a zero-norm vector")
    return norms


def _distance_matrix(A, B, code):
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if code == 0:
        _check_nonzero(A, "A")
        _check_nonzero(B, "B")
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.zeros((A.shape[0], B.shape[0]))
    if USE_NUMBA:
        return _matrix_kernel(A, B, code)
    return _matrix_numpy(A, B, code)


def _scalar(f1, f2, code):
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f2, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError("scalar distances take two 1-D vectors")
    return float(_distance_matrix(_as_matrix(a, "f1"), _as_matrix(b, "f2"), code)[0, 0])


def cosine_distance(f1, f2):
    """``1 - cos(f1, f2)``, in ``[0, 2]``. Zero vectors raise :class:`DomainError`."""
    return _scalar(f1, f2, 0)


def euclidean_distance(f1, f2):
    return _scalar(f1, f2, 1)


def squared_euclidean_distance(f1, f2):
    return _scalar(f1, f2, 2)


def distance(f1, f2, metric):
    return _scalar(f1, f2, DistanceMetric.parse(metric).code)


def l2_normalize(f):
    """Scale ``f`` (a vector or the rows of a matrix) to unit L2 norm."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        norm = np.sqrt(np.dot(f, f))
        if norm == 0.0:
            raise DomainError("cannot normalise a zero vector")
        return f / norm
    X = _as_matrix(f, "f")
    norms = _check_nonzero(X, "f")
    return X / norms[:, None]


def pairwise_distances(A, B, metric="euclidean", normalize=False):
    """Distance matrix of shape ``(len(A), len(B))``.

    Parameters
    ----------
    A, B : array_like
        Stacks of embeddings, one per row. A single vector is treated as a
        one-row stack.
    metric : DistanceMetric or str
    normalize : bool
        L2-normalise both sides before measuring.
    """
    code = DistanceMetric.parse(metric).code
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if normalize:
        A = l2_normalize(A)
        B = l2_normalize(B)
    return _distance_matrix(A, B, code)


def rowwise_distances(X, Y, metric="euclidean", normalize=False):
    """``d(X[i], Y[i])`` for every row (same arithmetic as the scalar metrics)."""
    code = DistanceMetric.parse(metric).code
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    if X.shape != Y.shape:
        raise ShapeError(f"row-wise distance needs equal shapes, got {X.shape} and {Y.shape}")
    if normalize:
        X = l2_normalize(X)
        Y = l2_normalize(Y)
    if code == 0:
        _check_nonzero(X, "X")
        _check_nonzero(Y, "Y")
    if USE_NUMBA:
        return _rowwise_kernel(X, Y, code)
    return _matrix_numpy(X[:, None, :], Y[:, None, :], code, rowwise=True)


def distance_gradients(X, Y, metric="euclidean", normalize=False):
    """Row-wise distances ``d(X[i], Y[i])`` and their gradients.

    Returns ``(d, grad_x, grad_y)``. Where the euclidean distance is zero the
    gradient is taken as 0.
    """
    metric = DistanceMetric.parse(metric)
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    if X.shape != Y.shape:
        raise ShapeError(f"row-wise distance needs equal shapes, got {X.shape} and {Y.shape}")
    nx = ny = None
    if normalize:
        nx = _check_nonzero(X, "X")
        ny = _check_nonzero(Y, "Y")
        U, V = X / nx[:, None], Y / ny[:, None]
    else:
        U, V = X, Y

    if metric is DistanceMetric.COSINE:
        nu = _check_nonzero(U, "X")
        nv = _check_nonzero(V, "Y")
        dot = np.einsum("ij,ij->i", U, V)
        denom = nu * nv
        c = dot / denom
        d = 1.0 - c
        gu = -(V / denom[:, None] - (c / nu**2)[:, None] * U)
        gv = -(U / denom[:, None] - (c / nv**2)[:, None] * V)
    else:
        diff = U - V
        sq = np.einsum("ij,ij->i", diff, diff)
        if metric is DistanceMetric.SQUARED_EUCLIDEAN:
            d = sq
            gu = 2.0 * diff
        else:
            d = np.sqrt(sq)
            safe = np.where(d > 0.0, d, 1.0)
            gu = np.where((d > 0.0)[:, None], diff / safe[:, None], 0.0)
        gv = -gu

    if normalize:
        gu = (gu - np.einsum("ij,ij->i", gu, U)[:, None] * U) / nx[:, None]
        gv = (gv - np.einsum("ij,ij->i", gv, V)[:, None] * V) / ny[:, None]
    return d, gu, gv
