"""Point-cloud data model, seeded randomness, XYZ I/O and spatial queries."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from cp3.errors import BoundsError, DegenerateInputError, EmptyInputError, ParseError, ValidationError

_SEED_MASK = (1 << 64) - 1


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator for ``seed``; extra ``keys`` derive independent streams."""
    if seed < 0 or seed > _SEED_MASK:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    entropy = [int(seed)] + [int(k) & _SEED_MASK for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int) -> int:
    """A new 64-bit seed derived from ``seed`` and ``keys``."""
    return int(make_rng(seed, *keys).integers(0, 2**63))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    category: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.category is not None:
            object.__setattr__(self, "category", int(self.category))

    def __len__(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptyInputError("centroid of an empty cloud")
        return self.points.mean(axis=0)

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.category)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.category == other.category and np.array_equal(self.points, other.points)

    __hash__ = None


def _format_coord(x: float) -> str:
    # repr() is the shortest string that round-trips exactly
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def load_xyz(path) -> PointCloud:
    """Read a whitespace-separated XYZ file with an optional ``#category <int>`` header."""
    category = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "category" and not rows and category is None:
                    try:
                        category = int(parts[1])
                    except ValueError:
                        raise ParseError(f"bad category value {parts[1]!r}", lineno) from None
                    continue
                raise ParseError(f"unexpected header {line!r}", lineno)
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 numbers, got {len(parts)} fields", lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"non-numeric field in {line!r}", lineno) from None
    if not rows:
        raise EmptyInputError(f"{os.fspath(path)}: no points")
    return PointCloud(np.array(rows), category)


def save_xyz(cloud: PointCloud, path) -> None:
    lines = []
    if cloud.category is not None:
        lines.append(f"#category {cloud.category}")
    for x, y, z in cloud.points:
        lines.append(f"{_format_coord(x)} {_format_coord(y)} {_format_coord(z)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot normalize an empty cloud")
    centered = cloud.points - cloud.points.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1)).max()
    if scale == 0.0:
        raise DegenerateInputError("all points are identical")
    return cloud.with_points(centered / scale)


def squared_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from every row of ``points`` to ``query``."""
    return ((points - query) ** 2).sum(axis=-1)


class SpatialIndex:
    """Immutable k-d tree over a cloud; results match an exhaustive scan exactly."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        if pts.shape[0] == 0:
            raise EmptyInputError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return self.points.shape[0]

    def knn(self, query, k: int) -> np.ndarray:
        return knn(self, query, k)


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points, by ascending distance then ascending index."""
    n = len(index)
    if k < 1 or k > n:
        raise BoundsError(f"k={k} out of range for {n} points")
    q = np.asarray(query, dtype=np.float64)
    dist, _ = index._tree.query(q, k=k)
    radius = float(np.atleast_1d(dist)[-1])
    # the tree's own distance rounding may differ from ours; widen to catch ties
    cand = np.array(sorted(index._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12)), dtype=np.int64)
    d2 = squared_distances(index.points[cand], q)
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


def knn_brute(points: np.ndarray, query, k: int) -> np.ndarray:
    n = points.shape[0]
    if k < 1 or k > n:
        raise BoundsError(f"k={k} out of range for {n} points")
    d2 = squared_distances(points, np.asarray(query, dtype=np.float64))
    return np.lexsort((np.arange(n), d2))[:k]


def knn_graph(points: np.ndarray, k: int) -> np.ndarray:
    """Neighbourhood table for every point of a (..., N, 3) array: shape (..., N, k).

    Row ``j`` lists the ``k`` nearest points to point ``j`` (itself first unless
    it has duplicates at a lower index), ties broken by index.
    """
    n = points.shape[-2]
    if k < 1 or k > n:
        raise BoundsError(f"k={k} out of range for {n} points")
    diff = points[..., :, None, :] - points[..., None, :, :]
    d2 = (diff**2).sum(axis=-1)
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


def farthest_point_sample(cloud: PointCloud, m: int, seed: int, start: Optional[int] = None) -> PointCloud:
    """Greedy maximin subset of ``m`` points; the first point is seed-chosen unless ``start`` is given."""
    idx = farthest_point_indices(cloud.points, m, seed, start)
    return cloud.with_points(cloud.points[idx])


def farthest_point_indices(points: np.ndarray, m: int, seed: int, start: Optional[int] = None) -> np.ndarray:
    n = points.shape[0]
    if m < 1 or m > n:
        raise BoundsError(f"m={m} out of range for {n} points")
    if start is None:
        start = int(make_rng(seed).integers(n))
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = squared_distances(points, points[start])
    mind[start] = -1.0  # chosen points stay below every candidate, even duplicates
    for i in range(1, m):
        nxt = int(np.argmax(mind))  # first maximum -> lowest index on ties
        chosen[i] = nxt
        np.minimum(mind, squared_distances(points, points[nxt]), out=mind)
        mind[nxt] = -1.0
    return chosen


def as_points(clouds: Sequence[PointCloud]) -> np.ndarray:
    """Stack equally-sized clouds into a (B, N, 3) array."""
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise ValidationError(f"clouds in a batch must share a size, got {sorted(sizes)}")
    return np.stack([c.points for c in clouds])
