"""Face verification: pair protocols, k-fold accuracy, ROC, EER and TAR@FAR.

Distances are "accept when ``d <= threshold``": small distance means same
identity.
"""
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import NamedTuple

import numpy as np

from .coremath import rowwise_distances
from .degrade import IMAGE_SIZE, degrade_pixels
from .errors import DataError, DomainError, ProtocolError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_FARS = (1e-3, 1e-2, 1e-1)


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

@dataclass
class PairProtocol:
    pairs: list
    folds: np.ndarray
    k: int = 10
    name: str = "protocol"

    def __post_init__(self):
        self.pairs = [(str(a), str(b), bool(g)) for a, b, g in self.pairs]
        self.folds = np.asarray(self.folds, dtype=np.int64)
        if len(self.folds) != len(self.pairs):
            raise ProtocolError("one fold label per pair is required")
        if len(self.folds) and (self.folds.min() < 0 or self.folds.max() >= self.k):
            raise ProtocolError(f"fold labels must lie in [0, {self.k})")

    def __len__(self):
        return len(self.pairs)

    @property
    def genuine(self):
        return np.array([g for _, _, g in self.pairs], dtype=bool)

    @property
    def refs(self):
        return sorted({r for a, b, _ in self.pairs for r in (a, b)})


def _unordered(a, b):
    return (a, b) if a <= b else (b, a)


def generate_pairs(pool, n_genuine, n_imposter, k=10, seed=0, name="generated"):
    """Random genuine and imposter pairs without duplicates.

    Folds are dealt round-robin over the shuffled genuine pairs and,
    separately, the shuffled imposter pairs, so each fold is balanced within
    one pair per class.
    """
    rng = np.random.default_rng(seed)
    ids = pool.identities
    sizes = np.array([len(pool.images[i]) for i in ids])
    max_genuine = int(np.sum(sizes * (sizes - 1) // 2))
    total = int(sizes.sum())
    max_imposter = int((total * total - np.sum(sizes * sizes)) // 2)
    if n_genuine > max_genuine:
        raise ProtocolError(f"requested {n_genuine} genuine pairs, only {max_genuine} exist")
    if n_imposter > max_imposter:
        raise ProtocolError(f"requested {n_imposter} imposter pairs, only {max_imposter} exist")
    if k < 1:
        raise ProtocolError("fold count must be positive")

    if max_genuine <= 200_000:
        candidates = [p for i in ids for p in combinations(sorted(pool.images[i]), 2)]
        pick = rng.choice(len(candidates), size=n_genuine, replace=False)
        genuine = [candidates[j] for j in sorted(pick)]
    else:
        weights = sizes * (sizes - 1) / 2.0
        genuine = _rejection_pairs(rng, n_genuine, lambda: _draw_genuine(rng, pool, ids, weights))
    all_refs = [(ref, i) for i in ids for ref in sorted(pool.images[i])]
    imposter = _rejection_pairs(rng, n_imposter, lambda: _draw_imposter(rng, all_refs))

    rows = []
    for group, flag in ((genuine, True), (imposter, False)):
        order = rng.permutation(len(group))
        for pos, j in enumerate(order):
            a, b = group[j]
            if rng.random() < 0.5:
                a, b = b, a
            rows.append((a, b, flag, pos % k))
    final = rng.permutation(len(rows))
    rows = [rows[j] for j in final]
    return PairProtocol([r[:3] for r in rows], [r[3] for r in rows], k, name)


def _rejection_pairs(rng, n, draw):
    seen = set()
    out = []
    while len(out) < n:
        pair = draw()
        if pair is None:
            continue
        key = _unordered(*pair)
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


def _draw_genuine(rng, pool, ids, weights):
    ident = ids[int(rng.choice(len(ids), p=weights / weights.sum()))]
    refs = pool.images[ident]
    i, j = rng.choice(len(refs), size=2, replace=False)
    return refs[i], refs[j]


def _draw_imposter(rng, all_refs):
    i, j = rng.integers(len(all_refs), size=2)
    (ra, ia), (rb, ib) = all_refs[i], all_refs[j]
    if ia == ib:
        return None
    return ra, rb


def write_protocol(protocol, path):
    """Native format: tab-separated ``ref1 ref2 genuine fold`` with a header."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["ref1", "ref2", "genuine", "fold"])
    for (a, b, g), f in zip(protocol.pairs, protocol.folds):
        w.writerow([a, b, int(g), int(f)])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_protocol(path, k=None):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
    except OSError as exc:
        raise DataError(f"cannot read protocol {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0][:4]] != ["ref1", "ref2", "genuine", "fold"]:
        raise ProtocolError(f"{path}: expected header 'ref1 ref2 genuine fold'")
    pairs, folds = [], []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ProtocolError(f"{path}:{n}: expected 4 columns, got {len(row)}")
        try:
            pairs.append((row[0], row[1], bool(int(row[2]))))
            folds.append(int(row[3]))
        except ValueError as exc:
            raise ProtocolError(f"{path}:{n}: {exc}") from exc
    k = k if k is not None else (max(folds) + 1 if folds else 1)
    return PairProtocol(pairs, folds, k, name=str(path))


def read_lfw_pairs(path, image_pattern="{name}/{name}_{num:04d}.jpg"):
    """Parse an LFW-style ``pairs.txt``.

    The optional first line ``<folds> <pairs per class per fold>`` sets the
    fold blocks; otherwise everything lands in one fold. Lines with three
    fields (``name n1 n2``) are genuine, four fields (``name1 n1 name2 n2``)
    imposter.
    """
    try:
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    k, per_class = 1, None
    if lines and len(lines[0]) <= 2 and all(t.isdigit() for t in lines[0]):
        head = [int(t) for t in lines.pop(0)]
        if len(head) == 2:
            k, per_class = head
    pairs, folds = [], []
    for n, parts in enumerate(lines):
        if len(parts) == 3:
            a = image_pattern.format(name=parts[0], num=int(parts[1]))
            b = image_pattern.format(name=parts[0], num=int(parts[2]))
            pairs.append((a, b, True))
        elif len(parts) == 4:
            a = image_pattern.format(name=parts[0], num=int(parts[1]))
            b = image_pattern.format(name=parts[2], num=int(parts[3]))
            pairs.append((a, b, False))
        else:
            raise ProtocolError(f"{path}: malformed pair line {' '.join(parts)!r}")
        folds.append(min(n // (2 * per_class), k - 1) if per_class else 0)
    return PairProtocol(pairs, folds, k, name=str(path))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _threshold_sweep(distances, genuine):
    """Candidate thresholds and the training accuracy of each.

    Candidates are ``-inf``, the midpoints between consecutive distinct
    distances and ``+inf``; they realise every distinct accept set.
    """
    d = np.asarray(distances, dtype=np.float64)
    g = np.asarray(genuine, dtype=bool)
    values = np.unique(d)
    gen = np.sort(d[g])
    imp = np.sort(d[~g])
    acc_gen = np.searchsorted(gen, values, side="right")
    rej_imp = len(imp) - np.searchsorted(imp, values, side="right")
    correct = np.concatenate(([len(imp)], (acc_gen + rej_imp)[:-1], [len(gen)]))
    thresholds = np.concatenate(([-np.inf], (values[:-1] + values[1:]) / 2.0, [np.inf]))
    return thresholds, correct / max(len(d), 1)


def best_threshold(distances, genuine):
    """Accuracy-maximising threshold; ties go to the smaller threshold."""
    thresholds, acc = _threshold_sweep(distances, genuine)
    j = int(np.argmax(acc))
    return float(thresholds[j]), float(acc[j])


def accuracy_at(distances, genuine, threshold):
    d = np.asarray(distances, dtype=np.float64)
    g = np.asarray(genuine, dtype=bool)
    return float(np.mean((d <= threshold) == g)) if len(d) else float("nan")


def kfold_thresholds(distances, genuine, folds):
    """Per-fold ``(threshold, test accuracy)`` with thresholds fit on the other folds."""
    d = np.asarray(distances, dtype=np.float64)
    g = np.asarray(genuine, dtype=bool)
    folds = np.asarray(folds, dtype=np.int64)
    if not (len(d) == len(g) == len(folds)):
        raise ProtocolError("distances, genuine flags and folds must have equal length")
    out = []
    for f in np.unique(folds):
        test = folds == f
        train = ~test
        if not train.any():
            raise ProtocolError("k-fold evaluation needs at least two folds")
        t, _ = best_threshold(d[train], g[train])
        out.append((t, accuracy_at(d[test], g[test], t)))
    return out


def kfold_accuracy(distances, genuine, folds):
    """Mean and (population) standard deviation of the k test-fold accuracies."""
    accs = np.array([a for _, a in kfold_thresholds(distances, genuine, folds)])
    return float(accs.mean()), float(accs.std())


class RocCurve(NamedTuple):
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray

    def points(self):
        return list(zip(self.far.tolist(), self.tar.tolist()))


def roc_curve(distances, genuine):
    """ROC over every distinct distance plus ``-inf``/``+inf`` sentinels.

    Points are ordered by increasing threshold, so FAR and TAR are both
    nondecreasing.
    """
    d = np.asarray(distances, dtype=np.float64)
    g = np.asarray(genuine, dtype=bool)
    n_gen, n_imp = int(g.sum()), int((~g).sum())
    if n_gen == 0 or n_imp == 0:
        raise DomainError("ROC needs at least one genuine and one imposter pair")
    values = np.unique(d)
    thresholds = np.concatenate(([-np.inf], values, [np.inf]))
    tar = np.searchsorted(np.sort(d[g]), thresholds, side="right") / n_gen
    far = np.searchsorted(np.sort(d[~g]), thresholds, side="right") / n_imp
    return RocCurve(far, tar, thresholds)


def _far_tar(roc):
    if isinstance(roc, RocCurve):
        return np.asarray(roc.far, float), np.asarray(roc.tar, float)
    pts = np.asarray(roc, dtype=np.float64).reshape(-1, 2)
    return pts[:, 0], pts[:, 1]


def equal_error_rate(roc):
    """Rate where FAR equals FRR = 1 - TAR, linearly interpolated along the sweep."""
    far, tar = _far_tar(roc)
    gap = far - (1.0 - tar)
    hit = np.flatnonzero(gap >= 0)
    if len(hit) == 0:
        return float(far[-1])
    j = int(hit[0])
    if j == 0:
        return float(far[0])
    g0, g1 = gap[j - 1], gap[j]
    t = -g0 / (g1 - g0)
    return float(far[j - 1] + t * (far[j] - far[j - 1]))


def tar_at_far(roc, far):
    """Largest TAR among ROC points with FAR at most ``far`` (0 if none)."""
    f, t = _far_tar(roc)
    ok = f <= far
    return float(t[ok].max()) if ok.any() else 0.0


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

class EmbeddingCache:
    """Embeddings per resolution for a fixed, sorted reference list.

    Every resolution is embedded over the same ordered references and chunk
    size, so an embedding never depends on which mode asked for it.
    """

    def __init__(self, model, store, refs, chunk=64, allow_missing=False):
        self.model = model
        self.store = store
        self.refs = sorted(refs)
        self.index = {r: i for i, r in enumerate(self.refs)}
        self.chunk = chunk
        self.allow_missing = allow_missing
        self.missing = {}
        self._by_res = {}

    def check(self):
        """Load every reference once; collect failures and raise them together."""
        for ref in self.refs:
            try:
                self.store[ref]
            except (DataError, KeyError, OSError) as exc:
                self.missing[ref] = str(exc)
        if self.missing and not self.allow_missing:
            lines = "\n".join(f"  {ref}: {msg}" for ref, msg in sorted(self.missing.items()))
            raise DataError(f"{len(self.missing)} image(s) could not be loaded:\n{lines}")
        return self

    def _load(self, ref):
        if ref in self.missing:
            return None
        return self.store[ref]

    def get(self, r):
        if r not in self._by_res:
            rows = []
            for start in range(0, len(self.refs), self.chunk):
                imgs = []
                for ref in self.refs[start:start + self.chunk]:
                    img = self._load(ref)
                    if img is None:
                        img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), np.float32)
                    imgs.append(degrade_pixels(img, r))
                rows.append(np.asarray(self.model.embed(np.stack(imgs)), dtype=np.float64))
            self._by_res[r] = np.concatenate(rows)
        return self._by_res[r]

    def lookup(self, r, refs):
        E = self.get(r)
        return E[[self.index[x] for x in refs]]


def pair_cosine_distances(e1, e2):
    return rowwise_distances(e1, e2, "cosine")


@dataclass
class VerificationReport:
    mode: str
    rows: list
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def row(self, resolution):
        for r in self.rows:
            if r["resolution"] == resolution:
                return r
        raise KeyError(resolution)

    def accuracy(self, resolution):
        return self.row(resolution)["accuracy"]

    def to_dict(self, include_roc=True):
        rows = []
        for r in self.rows:
            r = dict(r)
            if not include_roc:
                r.pop("roc", None)
            rows.append(r)
        return {"schema_version": self.schema_version, "mode": self.mode,
                "config": self.config, "rows": rows}

    def to_json(self, include_roc=True):
        return json.dumps(self.to_dict(include_roc), indent=2, sort_keys=True) + "\n"

    def csv_header(self):
        fars = sorted(self.rows[0]["tar_at_far"]) if self.rows else []
        return (["resolution", "mode", "accuracy", "accuracy_std", "eer"]
                + [f"tar@far={f}" for f in fars])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        for r in self.rows:
            fars = sorted(r["tar_at_far"])
            w.writerow([r["resolution"], self.mode, repr(r["accuracy"]), repr(r["accuracy_std"]),
                        repr(r["eer"])] + [repr(r["tar_at_far"][f]) for f in fars])
        return buf.getvalue()

    def roc_csv(self, resolution):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["far", "tar"])
        for far, tar in self.row(resolution)["roc"]:
            w.writerow([repr(far), repr(tar)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, data):
        return cls(data["mode"], data["rows"], data.get("config", {}),
                   data.get("schema_version", SCHEMA_VERSION))


def _report_row(r, distances, protocol, fars, n_used):
    genuine = protocol.genuine
    mean, std = kfold_accuracy(distances, genuine, protocol.folds)
    row = {"resolution": int(r), "accuracy": mean, "accuracy_std": std, "pairs": int(n_used)}
    if genuine.any() and (~genuine).any():
        roc = roc_curve(distances, genuine)
        row["eer"] = equal_error_rate(roc)
        row["tar_at_far"] = {str(f): tar_at_far(roc, f) for f in fars}
        row["roc"] = [[float(a), float(b)] for a, b in zip(roc.far, roc.tar)]
    else:
        row["eer"] = float("nan")
        row["tar_at_far"] = {str(f): float("nan") for f in fars}
        row["roc"] = []
    return row


def _evaluate(model, protocol, store, resolutions, mode, fars, cache, allow_missing, config):
    if cache is None:
        cache = EmbeddingCache(model, store, protocol.refs, allow_missing=allow_missing).check()
    refs1 = [a for a, _, _ in protocol.pairs]
    refs2 = [b for _, b, _ in protocol.pairs]
    rows = []
    for r in sorted({int(x) for x in resolutions}):
        first_res = IMAGE_SIZE if mode == "cross" else r
        e1 = cache.lookup(first_res, refs1)
        e2 = cache.lookup(r, refs2)
        dist = pair_cosine_distances(e1, e2)
        keep = np.ones(len(protocol), dtype=bool)
        if cache.missing:
            keep = np.array([a not in cache.missing and b not in cache.missing
                             for a, b in zip(refs1, refs2)])
        sub = PairProtocol([p for p, k in zip(protocol.pairs, keep) if k],
                           protocol.folds[keep], protocol.k, protocol.name)
        rows.append(_report_row(r, dist[keep], sub, fars, keep.sum()))
    cfg = {"protocol": protocol.name, "pairs": len(protocol), "folds": protocol.k,
           "metric": "cosine", "resolutions": sorted(int(x) for x in resolutions)}
    if cache.missing:
        cfg["skipped_images"] = dict(sorted(cache.missing.items()))
    cfg.update(config or {})
    return VerificationReport(mode, rows, cfg)


def evaluate_cross_resolution(model, protocol, store, resolutions=(7, 14, 28, 56, 112),
                              fars=DEFAULT_FARS, cache=None, allow_missing=False, config=None):
    """Degrade only the second image of each pair to every resolution.

    ``model`` needs an ``embed(images) -> (n, d)`` method taking
    ``(n, 112, 112, 3)`` float arrays; ``store`` maps references to pixels.
    """
    return _evaluate(model, protocol, store, resolutions, "cross", fars, cache,
                     allow_missing, config)


def evaluate_same_resolution(model, protocol, store, resolutions=(7, 14, 28, 56, 112),
                             fars=DEFAULT_FARS, cache=None, allow_missing=False, config=None):
    """Degrade both images of each pair to every resolution."""
    return _evaluate(model, protocol, store, resolutions, "same", fars, cache,
                     allow_missing, config)
