"""Incompletion-of-incompletion sampling: crop an already partial cloud once more.

A random plane through the cloud's centroid is drawn; points are ranked by their
signed distance along the plane normal and the ``floor(r * N)`` points farthest
on the positive side are removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from cp3.errors import ValidationError
from cp3.geometry import PointCloud, make_rng

DEFAULT_GAMMA = 0.9


@dataclass(frozen=True)
class CropPlane:
    theta: float
    phi: float

    def __post_init__(self):
        if not 0.0 <= self.theta <= math.pi:
            raise ValidationError(f"theta {self.theta} outside [0, pi]")
        if not 0.0 <= self.phi < 2 * math.pi:
            raise ValidationError(f"phi {self.phi} outside [0, 2pi)")

    @property
    def v(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])


@dataclass(frozen=True)
class IoiConfig:
    gamma: float = DEFAULT_GAMMA
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")


def plane_from_rng(rng: np.random.Generator) -> CropPlane:
    # cos(theta) uniform in [-1, 1] gives theta the sin(theta) density
    theta = math.acos(float(rng.uniform(-1.0, 1.0)))
    phi = float(rng.uniform(0.0, 2 * math.pi))
    return CropPlane(theta, phi)


def sample_crop_plane(seed: int) -> CropPlane:
    """Plane with a normal uniformly distributed on the unit sphere."""
    return plane_from_rng(make_rng(seed))


def projection_distances(cloud: PointCloud, plane: CropPlane) -> np.ndarray:
    """Signed distance of every point to the plane through the centroid with normal ``v``."""
    centered = cloud.points - cloud.centroid()
    return centered @ plane.v


def drop_count(n: int, r: float) -> int:
    return int(math.floor(r * n))


def ioi_crop(cloud: PointCloud, r: float, plane: CropPlane) -> Tuple[PointCloud, PointCloud]:
    """Split ``cloud`` into (kept, dropped); dropped are the floor(rN) largest distances.

    Equal distances are resolved by index: among tied points the lower index is
    kept. Both outputs preserve input order.
    """
    if not 0.0 <= r < 1.0:
        raise ValidationError(f"crop rate must lie in [0, 1), got {r}")
    n = len(cloud)
    m = drop_count(n, r)
    mask = np.zeros(n, dtype=bool)
    if m:
        d = projection_distances(cloud, plane)
        # ascending by (d, index): the last m entries are the largest d, ties giving up the higher index
        order = np.lexsort((np.arange(n), d))
        mask[order[n - m :]] = True
    return cloud.with_points(cloud.points[~mask]), cloud.with_points(cloud.points[mask])


def ioi_sample(incomplete: PointCloud, cfg: IoiConfig) -> Tuple[PointCloud, PointCloud]:
    """Seeded IOI crop: rate uniform in [0, gamma), then a random plane. Returns (kept, dropped)."""
    if len(incomplete) < 2:
        raise ValidationError("need at least 2 points to build a pretraining pair")
    rng = make_rng(cfg.seed)
    r = float(rng.uniform(0.0, cfg.gamma)) if cfg.gamma > 0 else 0.0
    plane = plane_from_rng(rng)
    return ioi_crop(incomplete, r, plane)


def make_pretrain_pair(incomplete: PointCloud, cfg: IoiConfig) -> Tuple[PointCloud, PointCloud]:
    """(IOI input, incomplete target) with the crop rate drawn uniformly from [0, gamma)."""
    kept, _ = ioi_sample(incomplete, cfg)
    return kept, incomplete
