"""Segmentation metrics: pixel-wise JI, F1, ABD and object-level OV.

Masks are 2-D arrays where any nonzero value counts as foreground.  Metrics
that would divide by zero raise :class:`UndefinedMetricError` instead of
returning a silent 0.
"""
from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError, UndefinedMetricError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _pair(P, R):
    P = np.asarray(P) != 0
    R = np.asarray(R) != 0
    if P.shape != R.shape:
        raise InvalidArgumentError(f"mask shapes differ: {P.shape} vs {R.shape}")
    return P, R


def jaccard(P, R) -> float:
    P, R = _pair(P, R)
    union = np.count_nonzero(P | R)
    if union == 0:
        raise UndefinedMetricError("jaccard undefined for two empty masks")
    return np.count_nonzero(P & R) / union


def f1(P, R) -> float:
    P, R = _pair(P, R)
    total = np.count_nonzero(P) + np.count_nonzero(R)
    if total == 0:
        raise UndefinedMetricError("f1 undefined for two empty masks")
    return 2 * np.count_nonzero(P & R) / total


f1_score = f1


def boundary(M) -> np.ndarray:
    """Inner 4-connected boundary as an ``(n, 2)`` array of (row, col), sorted.

    A mask pixel is on the boundary when one of its four neighbours is
    background or lies outside the image.
    """
    M = np.asarray(M) != 0
    interior = ndimage.binary_erosion(M, FOUR_CONNECTED, border_value=0)
    return np.argwhere(M & ~interior)


def boundary_mask(M) -> np.ndarray:
    M = np.asarray(M) != 0
    return M & ~ndimage.binary_erosion(M, FOUR_CONNECTED, border_value=0)


def abd(P, R) -> float:
    """Average symmetric distance between the two boundary sets, in pixels."""
    P, R = _pair(P, R)
    pb, rb = boundary(P), boundary(R)
    if len(pb) == 0 or len(rb) == 0:
        raise UndefinedMetricError("abd undefined when a boundary is empty")
    d_pr, _ = cKDTree(rb).query(pb)
    d_rp, _ = cKDTree(pb).query(rb)
    a, b = d_pr.mean(), d_rp.mean()
    # order-independent sum keeps abd(P, R) == abd(R, P) bit for bit
    return 0.5 * (min(a, b) + max(a, b))


def label_instances(M) -> np.ndarray:
    """4-connected component labels, 0 for background."""
    labels, _ = ndimage.label(np.asarray(M) != 0, structure=FOUR_CONNECTED)
    return labels


def _intersections(P_inst, R_inst):
    P_inst = np.asarray(P_inst)
    R_inst = np.asarray(R_inst)
    if P_inst.shape != R_inst.shape:
        raise InvalidArgumentError("instance maps differ in shape")
    both = (P_inst > 0) & (R_inst > 0)
    pairs, counts = np.unique(np.stack([R_inst[both], P_inst[both]]), axis=1,
                              return_counts=True)
    return pairs, counts


def _greedy_pairs(P_inst, R_inst):
    """One-to-one (reference, computed, intersection) pairs, largest first.

    Ties are broken by the lower reference label, then the lower computed label.
    """
    pairs, counts = _intersections(P_inst, R_inst)
    order = np.lexsort((pairs[1], pairs[0], -counts))
    used_r, used_p, out = set(), set(), []
    for k in order:
        r, p = int(pairs[0, k]), int(pairs[1, k])
        if r in used_r or p in used_p:
            continue
        used_r.add(r)
        used_p.add(p)
        out.append((r, p, int(counts[k])))
    return out


def overlap(P_instances, R_instances) -> float:
    """Object-level overlap ``2I / (2I + FN + FP)`` under greedy matching.

    Each reference component is paired with at most one computed component
    (largest intersections first); ``I`` is the matched intersection area,
    FN the remaining reference pixels and FP the remaining computed pixels.
    """
    P_instances = np.asarray(P_instances)
    R_instances = np.asarray(R_instances)
    n_p = np.count_nonzero(P_instances)
    n_r = np.count_nonzero(R_instances)
    if n_p + n_r == 0:
        raise UndefinedMetricError("overlap undefined for two empty maps")
    inter = sum(c for _, _, c in _greedy_pairs(P_instances, R_instances))
    fn = n_r - inter
    fp = n_p - inter
    return 2 * inter / (2 * inter + fn + fp)


def nucleus_matches(P_instances, R_instances, iou: float = 0.5) -> int:
    """Number of reference nuclei matched by a computed component with IoU >= ``iou``."""
    P_instances = np.asarray(P_instances)
    R_instances = np.asarray(R_instances)
    p_area = np.bincount(P_instances.reshape(-1))
    r_area = np.bincount(R_instances.reshape(-1))
    hits = 0
    for r, p, inter in _greedy_pairs(P_instances, R_instances):
        if inter / (r_area[r] + p_area[p] - inter) >= iou:
            hits += 1
    return hits


@dataclass(frozen=True)
class MetricsRow:
    image: str
    organ: str
    ji: float
    f1: float
    abd: float
    ov: float


def _safe(fn, *args) -> float:
    try:
        return float(fn(*args))
    except UndefinedMetricError:
        return float("nan")


def evaluate_pair(P, R, image: str = "", organ: str = "") -> MetricsRow:
    """All four metrics for one prediction; undefined ones are NaN."""
    P, R = _pair(P, R)
    return MetricsRow(image, organ, _safe(jaccard, P, R), _safe(f1, P, R), _safe(abd, P, R),
                      _safe(overlap, label_instances(P), label_instances(R)))


def _mean_row(name: str, rows: Sequence[MetricsRow]) -> MetricsRow:
    def avg(attr):
        vals = np.array([getattr(r, attr) for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")
    return MetricsRow(name, "", avg("ji"), avg("f1"), avg("abd"), avg("ov"))


@dataclass(frozen=True)
class MetricsReport:
    per_image: tuple
    aggregate: tuple

    @classmethod
    def from_rows(cls, rows: Iterable[MetricsRow], splits: Sequence[str]) -> "MetricsReport":
        """Aggregate rows by split: ``same_test``, ``different_test`` and all."""
        rows = tuple(rows)
        same = [r for r, s in zip(rows, splits) if s == "same_test"]
        diff = [r for r, s in zip(rows, splits) if s == "different_test"]
        agg = (_mean_row("__same__", same), _mean_row("__different__", diff),
               _mean_row("__overall__", rows))
        return cls(rows, agg)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "organ", "ji", "f1", "abd", "ov"])
        for r in self.per_image + self.aggregate:
            w.writerow([r.image, r.organ] + [repr(float(v)) for v in (r.ji, r.f1, r.abd, r.ov)])
        return buf.getvalue()
