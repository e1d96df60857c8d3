"""Deterministic parametric shapes with partial views and category labels.

Surfaces are sampled uniformly by area. Chair-like and table-like composites
are built from the same seat slab and legs; the chair adds a back panel, so a
partial view that misses the back is genuinely ambiguous between the two.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cp3.errors import ValidationError
from cp3.geometry import PointCloud, derive_seed, load_xyz, make_rng, normalize_unit_sphere, save_xyz
from cp3.ioi import ioi_crop, sample_crop_plane

KINDS = ("sphere", "box", "cylinder", "chair", "table")
DEFAULT_CATEGORIES = ("sphere", "box", "chair", "table")
SLAB_THICKNESS = 0.08
LEG_THICKNESS = 0.08


@dataclass(frozen=True)
class ShapeSpec:
    category: int
    kind: str
    n_points: int = 256
    crop_rate: float = 0.5
    seed: int = 0
    size: Optional[Tuple[float, ...]] = None
    jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        if self.n_points < 16:
            raise ValidationError("n_points must be >= 16")
        if not 0.0 < self.crop_rate <= 0.8:
            raise ValidationError("crop_rate must lie in (0, 0.8]")
        if self.jitter < 0:
            raise ValidationError("jitter must be nonnegative")


# --------------------------------------------------------------------------- primitives


def box_faces(center, half) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """The 6 faces of an axis-aligned box as (origin, edge_u, edge_v) parallelograms."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)
    faces = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            origin = c.copy()
            origin[axis] += sign * h[axis]
            origin[u_ax] -= h[u_ax]
            origin[v_ax] -= h[v_ax]
            eu = np.zeros(3)
            eu[u_ax] = 2 * h[u_ax]
            ev = np.zeros(3)
            ev[v_ax] = 2 * h[v_ax]
            faces.append((origin, eu, ev))
    return faces


def _sample_faces(faces, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    areas = np.array([np.linalg.norm(np.cross(eu, ev)) for _, eu, ev in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, owner = [], []
    for i, ((origin, eu, ev), m) in enumerate(zip(faces, counts)):
        st = rng.uniform(size=(m, 2))
        pts.append(origin + st[:, :1] * eu + st[:, 1:] * ev)
        owner.append(np.full(m, i))
    return np.concatenate(pts), np.concatenate(owner)


def _sphere(n, radius, rng):
    d = rng.normal(size=(n, 3))
    return radius * d / np.linalg.norm(d, axis=1, keepdims=True)


def _cylinder(n, radius, height, rng):
    side = 2 * math.pi * radius * height
    cap = math.pi * radius**2
    counts = rng.multinomial(n, np.array([side, cap, cap]) / (side + 2 * cap))
    ang = rng.uniform(0, 2 * math.pi, counts[0])
    z = rng.uniform(-height / 2, height / 2, counts[0])
    parts = [np.stack([radius * np.cos(ang), radius * np.sin(ang), z], axis=1)]
    for m, zc in zip(counts[1:], (-height / 2, height / 2)):
        r = radius * np.sqrt(rng.uniform(size=m))
        a = rng.uniform(0, 2 * math.pi, m)
        parts.append(np.stack([r * np.cos(a), r * np.sin(a), np.full(m, zc)], axis=1))
    return np.concatenate(parts)


def furniture_parts(kind: str, width: float, depth: float, leg_height: float, back_height: float):
    """Boxes (center, half-extents) for a seat/table slab, four legs and, for chairs, a back."""
    t, lt = SLAB_THICKNESS, LEG_THICKNESS
    parts = [((0.0, 0.0, leg_height + t / 2), (width / 2, depth / 2, t / 2))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx = sx * (width / 2 - lt / 2)
            cy = sy * (depth / 2 - lt / 2)
            parts.append(((cx, cy, leg_height / 2), (lt / 2, lt / 2, leg_height / 2)))
    if kind == "chair":
        z0 = leg_height + t
        parts.append(((0.0, -depth / 2 + t / 2, z0 + back_height / 2), (width / 2, t / 2, back_height / 2)))
    return parts


def default_size(kind: str, rng: np.random.Generator) -> Tuple[float, ...]:
    if kind == "sphere":
        return (float(rng.uniform(0.5, 1.5)),)
    if kind == "box":
        return tuple(float(x) for x in rng.uniform(0.4, 1.2, size=3))
    if kind == "cylinder":
        return (float(rng.uniform(0.3, 0.6)), float(rng.uniform(0.6, 1.4)))
    # chair and table draw from identical ranges so only the back differs
    return (
        float(rng.uniform(0.8, 1.0)),
        float(rng.uniform(0.8, 1.0)),
        float(rng.uniform(0.6, 0.8)),
        float(rng.uniform(0.6, 0.8)),
    )


def sample_surface(spec: ShapeSpec) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Raw (unnormalized) surface samples and, for faceted shapes, the face id of each point."""
    rng = make_rng(spec.seed)
    size = spec.size if spec.size is not None else default_size(spec.kind, rng)
    n = spec.n_points
    owner = None
    if spec.kind == "sphere":
        pts = _sphere(n, size[0], rng)
    elif spec.kind == "cylinder":
        pts = _cylinder(n, size[0], size[1], rng)
    elif spec.kind == "box":
        pts, owner = _sample_faces(box_faces((0, 0, 0), np.asarray(size) / 2), n, rng)
    else:
        faces = []
        for center, half in furniture_parts(spec.kind, *size):
            faces.extend(box_faces(center, half))
        pts, owner = _sample_faces(faces, n, rng)
    if spec.jitter:
        pts = pts + rng.normal(scale=spec.jitter, size=pts.shape)
    return pts, owner


def generate_shape(spec: ShapeSpec) -> PointCloud:
    pts, _ = sample_surface(spec)
    return normalize_unit_sphere(PointCloud(pts, spec.category))


def make_partial(complete: PointCloud, spec: ShapeSpec) -> PointCloud:
    """One-sided planar crop of the complete cloud at the spec's crop rate."""
    plane = sample_crop_plane(derive_seed(spec.seed, 1))
    kept, _ = ioi_crop(complete, spec.crop_rate, plane)
    return kept


# --------------------------------------------------------------------------- datasets


@dataclass
class Sample:
    split: str
    category: int
    partial: PointCloud
    complete: PointCloud


@dataclass
class Dataset:
    samples: List[Sample] = field(default_factory=list)
    category_names: Tuple[str, ...] = DEFAULT_CATEGORIES

    def split(self, name: str) -> List[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def num_categories(self) -> int:
        return len(self.category_names)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.category_names == other.category_names and len(self.samples) == len(other.samples) and all(
            a.split == b.split and a.category == b.category and a.partial == b.partial and a.complete == b.complete
            for a, b in zip(self.samples, other.samples)
        )


def default_specs(
    seed: int = 0,
    per_category: int = 50,
    n_points: int = 256,
    crop_rate: float = 0.5,
    kinds: Sequence[str] = DEFAULT_CATEGORIES,
    jitter: float = 0.0,
) -> List[ShapeSpec]:
    specs = []
    for cat, kind in enumerate(kinds):
        for i in range(per_category):
            specs.append(ShapeSpec(cat, kind, n_points, crop_rate, derive_seed(seed, cat, i), jitter=jitter))
    return specs


def split_assignment(categories: Sequence[int], train_fraction: float, seed: int) -> List[str]:
    """Stratified train/val labels: per category, a seeded shuffle then the first share goes to train."""
    categories = np.asarray(categories)
    out = [""] * len(categories)
    for cat in np.unique(categories):
        idx = np.flatnonzero(categories == cat)
        perm = make_rng(seed, int(cat)).permutation(idx)
        n_train = int(round(train_fraction * len(idx)))
        for j, i in enumerate(perm):
            out[i] = "train" if j < n_train else "val"
    return out


def generate_dataset(
    specs: Sequence[ShapeSpec],
    split: Tuple[float, float] = (0.8, 0.2),
    seed: int = 0,
    category_names: Sequence[str] = DEFAULT_CATEGORIES,
) -> Dataset:
    if not math.isclose(sum(split), 1.0, abs_tol=1e-9) or min(split) < 0:
        raise ValidationError(f"split fractions must be nonnegative and sum to 1, got {split}")
    labels = split_assignment([s.category for s in specs], split[0], seed)
    samples = []
    for spec, lab in zip(specs, labels):
        complete = generate_shape(spec)
        samples.append(Sample(lab, spec.category, make_partial(complete, spec), complete))
    return Dataset(samples, tuple(category_names))


def write_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.txt") -> Path:
    """Write XYZ files plus ``<split> <category> <partial> <complete>`` manifest lines."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["#categories " + " ".join(dataset.category_names)]
    for i, s in enumerate(dataset.samples):
        sub = out / s.split
        sub.mkdir(exist_ok=True)
        stem = f"{i:05d}_{dataset.category_names[s.category]}"
        p_path, c_path = sub / f"{stem}_partial.xyz", sub / f"{stem}_complete.xyz"
        save_xyz(s.partial, p_path)
        save_xyz(s.complete, c_path)
        lines.append(f"{s.split} {s.category} {p_path.relative_to(out)} {c_path.relative_to(out)}")
    manifest = out / manifest_name
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def build_dataset(specs, split=(0.8, 0.2), seed: int = 0, out_dir=".", category_names=DEFAULT_CATEGORIES) -> Path:
    return write_dataset(generate_dataset(specs, split, seed, category_names), out_dir)


def load_manifest(path) -> Dataset:
    path = Path(path)
    base = path.parent
    names: Tuple[str, ...] = DEFAULT_CATEGORIES
    samples = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#categories"):
            names = tuple(line.split()[1:])
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] not in ("train", "val"):
            raise ValidationError(f"{os.fspath(path)}:{lineno}: malformed manifest line {line!r}")
        split, cat, p_rel, c_rel = parts
        samples.append(Sample(split, int(cat), load_xyz(base / p_rel), load_xyz(base / c_rel)))
    return Dataset(samples, names)


def category_subset(samples: Sequence[Sample], categories: Sequence[int]) -> List[Sample]:
    keep = set(categories)
    return [s for s in samples if s.category in keep]


def names_index(dataset: Dataset) -> Dict[str, int]:
    return {n: i for i, n in enumerate(dataset.category_names)}
