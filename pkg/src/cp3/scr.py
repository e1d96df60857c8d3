"""Semantic conditional refinement: a stack of modulation + point-deconvolution units.

Each unit (1) optionally modulates the incoming displacement features with the
semantic vector, (2) builds query features from the current coordinates and the
generator's global feature, (3) runs vector attention at every neighbourhood
size, (4) splits the concatenated context features into ``u`` rows per point,
fuses them into the next displacement features and (5) adds a predicted
coordinate offset to the ``u``-fold duplicated input cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from cp3 import autodiff as ad
from cp3.autodiff import Tensor
from cp3.blocks import AttentionParams, MlpParams, init_attention, init_mlp, mlp_forward, vector_attention, zero_mlp
from cp3.errors import ShapeError, ValidationError
from cp3.geometry import make_rng
from cp3.sgm import (
    AffinationParams,
    SgmParams,
    affination_apply,
    build_filter,
    concat_condition,
    init_affination,
    init_sgm,
    sgm_apply,
)

MODULATIONS = ("sgm", "affination", "concat", "none")
SEMANTICS = ("category", "global", "category+global")


@dataclass
class ScrConfig:
    num_categories: int = 4
    gen_width: int = 128
    global_width: int = 128
    channels: int = 64
    multipliers: Tuple[int, ...] = (1, 1, 8)
    k_list: Tuple[int, ...] = (12, 24)
    modulation: str = "sgm"
    semantics: str = "category"
    sgm_units: Tuple[bool, ...] = (True, False, False)
    eps: float = 1e-8

    def __post_init__(self):
        self.multipliers = tuple(int(u) for u in self.multipliers)
        self.k_list = tuple(int(k) for k in self.k_list)
        self.sgm_units = tuple(bool(s) for s in self.sgm_units)
        if self.modulation not in MODULATIONS:
            raise ValidationError(f"modulation must be one of {MODULATIONS}")
        if self.semantics not in SEMANTICS:
            raise ValidationError(f"semantics must be one of {SEMANTICS}")
        if not self.multipliers or any(u < 1 for u in self.multipliers):
            raise ValidationError("multipliers must be positive integers")
        if not self.k_list or any(b <= a for a, b in zip(self.k_list, self.k_list[1:])) or self.k_list[0] < 1:
            raise ValidationError("k_list must be nonempty and strictly increasing")
        if len(self.sgm_units) != len(self.multipliers):
            raise ValidationError("sgm_units needs one flag per unit")
        if self.num_categories < 1:
            raise ValidationError("need at least one category")

    @property
    def semantic_width(self) -> int:
        return {
            "category": self.num_categories,
            "global": self.global_width,
            "category+global": self.num_categories + self.global_width,
        }[self.semantics]


@dataclass
class RefinementUnit:
    u: int
    k_list: Tuple[int, ...]
    use_sgm: bool
    modulation: str
    query: MlpParams
    attention: List[AttentionParams]
    split: MlpParams
    fuse: MlpParams
    delta: MlpParams
    modulator: Optional[Union[SgmParams, AffinationParams]] = None


@dataclass
class ScrNet:
    config: ScrConfig
    proj: MlpParams
    units: List[RefinementUnit] = field(default_factory=list)


def init_unit(rng, cfg: ScrConfig, u: int, use_sgm: bool) -> RefinementUnit:
    C = cfg.channels
    modulation = cfg.modulation if use_sgm else "none"
    modulator = None
    key_width = C
    if modulation == "sgm":
        modulator = init_sgm(rng, cfg.semantic_width, C, C, cfg.eps)
    elif modulation == "affination":
        modulator = init_affination(rng, cfg.semantic_width, C)
    elif modulation == "concat":
        key_width = C + cfg.semantic_width
    ctx = C * len(cfg.k_list)
    return RefinementUnit(
        u=u,
        k_list=cfg.k_list,
        use_sgm=use_sgm,
        modulation=modulation,
        query=init_mlp(rng, [3 + cfg.global_width, C, C]),
        attention=[init_attention(rng, C, key_width, C, k) for k in cfg.k_list],
        split=init_mlp(rng, [ctx, u * ctx]),
        fuse=init_mlp(rng, [ctx, C, C]),
        delta=zero_mlp([C, 3]),
        modulator=modulator,
    )


def init_scr(cfg: ScrConfig, seed: int) -> ScrNet:
    rng = make_rng(seed)
    proj = init_mlp(rng, [cfg.gen_width, cfg.channels])
    units = [init_unit(rng, cfg, u, s) for u, s in zip(cfg.multipliers, cfg.sgm_units)]
    return ScrNet(cfg, proj, units)


def pointwise_split(H, u: int, params: MlpParams) -> Tensor:
    """Expand every row into ``u`` rows: (..., N, C) -> (..., u*N, C), row j*u+t from row j."""
    H = ad._as_tensor(H)
    if u < 1:
        raise ValidationError("split multiplier must be >= 1")
    C = H.shape[-1]
    Y = mlp_forward(params, H)
    if Y.shape[-1] != u * C:
        raise ShapeError("pointwise_split", f"MLP width {Y.shape[-1]} != u*C = {u * C}")
    return ad.reshape(Y, H.shape[:-2] + (H.shape[-2] * u, C))


def repeat_points(P, u: int) -> Tensor:
    P = ad._as_tensor(P)
    n = P.shape[-2]
    idx = np.repeat(np.arange(n), u)
    if P.ndim == 3:
        idx = np.broadcast_to(idx, (P.shape[0], n * u))
    return ad.gather(P, idx)


def semantic_vector(cfg: ScrConfig, S, glob) -> Tensor:
    """(B, C_sem) conditioning input: one-hot labels, global feature, or both."""
    if cfg.semantics == "category":
        return ad._as_tensor(S)
    g = ad._as_tensor(glob)
    g = ad.reshape(g, g.shape[:-2] + (g.shape[-1],))
    if cfg.semantics == "global":
        return g
    return ad.concat([ad._as_tensor(S), g], axis=-1)


def modulate(unit: RefinementUnit, K: Tensor, sem: Tensor) -> Tensor:
    if unit.modulation == "sgm":
        return sgm_apply(K, build_filter(unit.modulator, sem))
    if unit.modulation == "affination":
        return affination_apply(K, sem, unit.modulator)
    if unit.modulation == "concat":
        return concat_condition(K, sem)
    return K


def mpd_forward(unit: RefinementUnit, P, K_hat, glob) -> Tuple[Tensor, Tensor]:
    """One point-deconvolution step: returns (P_next with u*N points, K_next)."""
    P, K_hat, glob = ad._as_tensor(P), ad._as_tensor(K_hat), ad._as_tensor(glob)
    if P.shape[:-1] != K_hat.shape[:-1]:
        raise ShapeError("mpd_forward", f"points {P.shape} and features {K_hat.shape} disagree on rows")
    rows = P.shape[:-1] + (glob.shape[-1],)
    Q = mlp_forward(unit.query, ad.concat([P, ad.broadcast_to(glob, rows)], axis=-1))
    H = [vector_attention(att, P, Q, K_hat) for att in unit.attention]
    ctx = H[0] if len(H) == 1 else ad.concat(H, axis=-1)
    K_next = mlp_forward(unit.fuse, pointwise_split(ctx, unit.u, unit.split))
    dP = mlp_forward(unit.delta, K_next)
    return repeat_points(P, unit.u) + dP, K_next


def relabel(categories: np.ndarray, num_categories: int, seed: int) -> np.ndarray:
    """Replace every label by a uniformly drawn *different* label (identity if only one class)."""
    categories = np.asarray(categories, dtype=np.int64)
    if num_categories < 2:
        return categories.copy()
    rng = make_rng(seed)
    shift = rng.integers(1, num_categories, size=categories.shape)
    return (categories + shift) % num_categories


def labels_to_onehot(categories, num_categories: int) -> np.ndarray:
    categories = np.asarray(categories, dtype=np.int64)
    if np.any(categories < 0) or np.any(categories >= num_categories):
        raise ValidationError(f"labels must lie in [0, {num_categories})")
    return np.eye(num_categories)[categories]


def scr_forward(
    net: ScrNet,
    coarse,
    pointwise,
    glob,
    S,
    label_mode: str = "correct",
    seed: int = 0,
) -> List[Tensor]:
    """Run every unit; returns the per-unit clouds, the last being the final prediction.

    ``S`` is a (B, C_cate) one-hot batch (or a single (C_cate,) vector). With
    ``label_mode="random"`` each label is swapped for a random other category.
    """
    cfg = net.config
    coarse, pointwise, glob = ad._as_tensor(coarse), ad._as_tensor(pointwise), ad._as_tensor(glob)
    if coarse.shape[:-1] != pointwise.shape[:-1]:
        raise ShapeError("scr_forward", f"coarse {coarse.shape} and features {pointwise.shape} disagree on rows")
    S = np.asarray(S.value if isinstance(S, Tensor) else S, dtype=np.float64)
    if S.shape[-1] != cfg.num_categories:
        raise ShapeError("scr_forward", f"label width {S.shape[-1]} != {cfg.num_categories}")
    if label_mode == "random":
        S = labels_to_onehot(relabel(S.argmax(axis=-1), cfg.num_categories, seed), cfg.num_categories)
    elif label_mode != "correct":
        raise ValidationError(f"unknown label_mode {label_mode!r}")
    sem = semantic_vector(cfg, S, glob)
    P = coarse
    K = mlp_forward(net.proj, pointwise)
    outputs = []
    for unit in net.units:
        K_hat = modulate(unit, K, sem)
        P, K = mpd_forward(unit, P, K_hat, glob)
        outputs.append(P)
    return outputs


def output_sizes(cfg: ScrConfig, num_coarse: int) -> List[int]:
    sizes, n = [], num_coarse
    for u in cfg.multipliers:
        n *= u
        sizes.append(n)
    return sizes
