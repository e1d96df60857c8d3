"""Completion-quality metrics: Chamfer L1/L2, F-score, fidelity and consistency.

Every nearest-neighbour quantity has two routes, ``method="fast"`` (k-d tree
candidates) and ``method="brute"`` (all pairs). Both finish with the same
per-point squared-distance expression, so they agree bit for bit.

Conventions: CD-L2 is the *sum* of the two directional mean squared distances;
CD-L1 is *half* the sum of the two directional mean distances. Raw values are
unscaled; reports apply the x1e3 / x1e4 factors.
"""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from cp3.errors import EmptyInputError, ValidationError
from cp3.geometry import PointCloud

FSCORE_TAU = 0.01
_CANDIDATES = 4


def _pts(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyInputError("metric undefined for an empty cloud")
    return pts


def _sqnorm(d: np.ndarray) -> np.ndarray:
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_sq_brute(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each row of ``src``, the squared distance to its nearest row of ``dst``."""
    out = np.empty(src.shape[0])
    step = max(1, 2_000_000 // max(1, dst.shape[0]))
    for s in range(0, src.shape[0], step):
        block = src[s : s + step]
        out[s : s + step] = _sqnorm(block[:, None, :] - dst[None, :, :]).min(axis=1)
    return out


def nearest_sq_fast(src: np.ndarray, dst: np.ndarray, tree: Optional[cKDTree] = None) -> np.ndarray:
    tree = tree if tree is not None else cKDTree(dst)
    k = min(_CANDIDATES, dst.shape[0])
    _, idx = tree.query(src, k=k)
    idx = idx.reshape(src.shape[0], k)
    # re-rank the tree's candidates with the exact expression used by the brute path
    return _sqnorm(src[:, None, :] - dst[idx]).min(axis=1)


def nearest_indices(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``dst`` of each ``src`` row's nearest neighbour, lowest index on ties."""
    k = min(_CANDIDATES, dst.shape[0])
    _, idx = cKDTree(dst).query(src, k=k)
    idx = idx.reshape(src.shape[0], k)
    d2 = _sqnorm(src[:, None, :] - dst[idx])
    best = d2.min(axis=1, keepdims=True)
    masked = np.where(d2 == best, idx, np.iinfo(np.int64).max)
    out = masked.min(axis=1)
    # every candidate tied: more equidistant points may lie beyond the k returned
    crowded = np.flatnonzero((d2 == best).all(axis=1)) if k < dst.shape[0] else []
    for i in crowded:
        out[i] = int(np.argmin(_sqnorm(src[i] - dst)))
    return out


def _nearest(src, dst, method):
    if method == "fast":
        return nearest_sq_fast(src, dst)
    if method == "brute":
        return nearest_sq_brute(src, dst)
    raise ValidationError(f"unknown method {method!r}")


def chamfer_l2(X, Y, method: str = "fast") -> float:
    x, y = _pts(X), _pts(Y)
    return float(np.mean(_nearest(x, y, method)) + np.mean(_nearest(y, x, method)))


def chamfer_l1(X, Y, method: str = "fast") -> float:
    x, y = _pts(X), _pts(Y)
    return float(0.5 * (np.mean(np.sqrt(_nearest(x, y, method))) + np.mean(np.sqrt(_nearest(y, x, method)))))


def precision_recall(pred, gt, tau: float, method: str = "fast"):
    if tau <= 0:
        raise ValidationError("tau must be positive")
    p, g = _pts(pred), _pts(gt)
    precision = float(np.mean(np.sqrt(_nearest(p, g, method)) <= tau))
    recall = float(np.mean(np.sqrt(_nearest(g, p, method)) <= tau))
    return precision, recall


def fscore(pred, gt, tau: float = FSCORE_TAU, method: str = "fast") -> float:
    """Harmonic mean of precision and recall at threshold ``tau`` (0 when both are 0)."""
    precision, recall = precision_recall(pred, gt, tau, method)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def fidelity(partial, output, method: str = "fast") -> float:
    """Mean distance from each input point to the nearest output point."""
    return float(np.mean(np.sqrt(_nearest(_pts(partial), _pts(output), method))))


def consistency(frames: Sequence, method: str = "fast") -> float:
    """Mean CD-L2 between consecutive frames of the same object."""
    if len(frames) < 2:
        raise ValidationError("consistency needs at least 2 frames")
    return float(np.mean([chamfer_l2(a, b, method) for a, b in zip(frames[:-1], frames[1:])]))


def normalize_pair(pred: PointCloud, gt: PointCloud):
    """Apply the ground truth's unit-sphere transform to both clouds."""
    g = _pts(gt)
    center = g.mean(axis=0)
    scale = np.sqrt(_sqnorm(g - center)).max()
    if scale == 0:
        scale = 1.0
    return (_pts(pred) - center) / scale, (g - center) / scale


# --------------------------------------------------------------------------- reports

SCALES = {"cd_l1": 1e3, "cd_l2": 1e4, "fscore": 1.0}
COLUMNS = ["category", "count", "cd_l1(x1e3)", "cd_l2(x1e4)", "fscore@1%"]


@dataclass
class MetricReport:
    """Per-category means and the overall sample-weighted mean."""

    per_category: Dict[str, Dict[str, float]] = field(default_factory=OrderedDict)
    counts: Dict[str, int] = field(default_factory=OrderedDict)
    overall: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, names: Sequence[str], rows: Sequence[Dict[str, float]]) -> "MetricReport":
        if not rows:
            raise EmptyInputError("no samples to report")
        groups: Dict[str, List[Dict[str, float]]] = OrderedDict()
        for name, row in sorted(zip(names, rows), key=lambda t: t[0]):
            groups.setdefault(name, []).append(row)
        rep = cls()
        keys = list(rows[0])
        for name, items in groups.items():
            rep.counts[name] = len(items)
            rep.per_category[name] = {k: float(np.mean([r[k] for r in items])) for k in keys}
        total = sum(rep.counts.values())
        rep.overall = {
            k: float(sum(rep.counts[c] * rep.per_category[c][k] for c in rep.counts) / total) for k in keys
        }
        return rep

    @property
    def cd_l2(self) -> float:
        return self.overall["cd_l2"]

    def _table_rows(self):
        rows = []
        for name in list(self.per_category) + ["overall"]:
            vals = self.overall if name == "overall" else self.per_category[name]
            count = sum(self.counts.values()) if name == "overall" else self.counts[name]
            rows.append(
                [
                    name,
                    str(count),
                    f"{vals['cd_l1'] * SCALES['cd_l1']:.4f}",
                    f"{vals['cd_l2'] * SCALES['cd_l2']:.4f}",
                    f"{vals['fscore']:.4f}",
                ]
            )
        return rows

    def to_text(self) -> str:
        rows = [COLUMNS] + self._table_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(COLUMNS))]
        lines = []
        for j, r in enumerate(rows):
            lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(self._table_rows())
        return buf.getvalue()
