"""Semantic-guided modulation and the two alternative conditioning operators.

The filter for a category is ``W = B / sqrt(colsum(B**2) + eps)`` with
``B[p, q] = scale(S)[p] * A[p, q]``; features are modulated as ``K @ W``.
Feature affination (``sigma(K) * alpha(S) + beta(S)``) and plain concatenation
are provided for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cp3 import autodiff as ad
from cp3.autodiff import Tensor
from cp3.blocks import MlpParams, init_mlp, mlp_forward
from cp3.errors import ShapeError, ValidationError

DEFAULT_EPS = 1e-8


def one_hot(category: int, num_categories: int) -> np.ndarray:
    if not 0 <= category < num_categories:
        raise ValidationError(f"category {category} outside [0, {num_categories})")
    s = np.zeros(num_categories)
    s[category] = 1.0
    return s


def check_one_hot(S: np.ndarray) -> None:
    S = np.asarray(S)
    ok = np.all((S == 0) | (S == 1)) and np.all(S.sum(axis=-1) == 1)
    if not ok:
        raise ValidationError("category label must be one-hot")


@dataclass
class SgmParams:
    A: np.ndarray
    scale_mlp: MlpParams
    eps: float = DEFAULT_EPS


def init_sgm(rng: np.random.Generator, sem_width: int, c_in: int, c_out: int, eps: float = DEFAULT_EPS) -> SgmParams:
    if eps <= 0:
        raise ValidationError("eps must be positive")
    bound = 1.0 / np.sqrt(c_in)
    return SgmParams(
        A=rng.uniform(-bound, bound, size=(c_in, c_out)),
        scale_mlp=init_mlp(rng, [sem_width, c_in, c_in]),
        eps=eps,
    )


def scale_vector(params: SgmParams, S) -> Tensor:
    """Channel scales from the semantic vector: (..., C_sem) -> (..., C_in)."""
    S = ad._as_tensor(S)
    if S.shape[-1] != params.scale_mlp.dims[0]:
        raise ShapeError("scale_vector", f"semantic width {S.shape[-1]} != {params.scale_mlp.dims[0]}")
    if S.ndim == 1:
        return ad.take(mlp_forward(params.scale_mlp, ad.expand_dims(S, 0)), 0)
    return mlp_forward(params.scale_mlp, S)


def filter_from_scales(A, scales: Tensor, eps: float) -> Tensor:
    A = ad._as_tensor(A)
    c_in, c_out = A.shape
    lead = scales.shape[:-1]
    full = lead + (c_in, c_out)
    B = ad.broadcast_to(ad.expand_dims(scales, -1), full) * ad.broadcast_to(A, full)
    colsq = ad.sum_reduce(B * B, axis=-2)
    denom = ad.sqrt(colsq + ad.constant(np.full(colsq.shape, eps)))
    return B / ad.broadcast_to(ad.expand_dims(denom, -2), full)


def build_filter(params: SgmParams, S) -> Tensor:
    """Normalized semantic filter, shape (C_in, C_out) or (..., C_in, C_out) for batched S."""
    return filter_from_scales(params.A, scale_vector(params, S), params.eps)


def sgm_apply(K, W) -> Tensor:
    """Modulated features ``K @ W``; a batched filter pairs with the matching batch of K."""
    K, W = ad._as_tensor(K), ad._as_tensor(W)
    if K.shape[-1] != W.shape[-2]:
        raise ShapeError("sgm_apply", f"feature width {K.shape[-1]} != filter rows {W.shape[-2]}")
    return ad.matmul(K, W)


@dataclass
class AffinationParams:
    sigma: MlpParams
    alpha: MlpParams
    beta: MlpParams


def init_affination(rng: np.random.Generator, sem_width: int, channels: int) -> AffinationParams:
    return AffinationParams(
        sigma=init_mlp(rng, [channels, channels]),
        alpha=init_mlp(rng, [sem_width, channels, channels]),
        beta=init_mlp(rng, [sem_width, channels, channels]),
    )


def affination_apply(K, S, params: AffinationParams) -> Tensor:
    """``sigma(K) * alpha(S) + beta(S)``, alpha/beta broadcast over the point rows."""
    K, S = ad._as_tensor(K), ad._as_tensor(S)
    if S.ndim == K.ndim - 1:
        S = ad.expand_dims(S, -2)
    alpha = mlp_forward(params.alpha, S)
    beta = mlp_forward(params.beta, S)
    sig = mlp_forward(params.sigma, K)
    if alpha.shape[-1] != sig.shape[-1]:
        raise ShapeError("affination_apply", f"alpha width {alpha.shape[-1]} != feature width {sig.shape[-1]}")
    return sig * ad.broadcast_to(alpha, sig.shape) + ad.broadcast_to(beta, sig.shape)


def concat_condition(K, S) -> Tensor:
    """Append the semantic vector to every feature row."""
    K, S = ad._as_tensor(K), ad._as_tensor(S)
    if S.ndim == K.ndim - 1:
        S = ad.expand_dims(S, -2)
    rows = K.shape[:-1] + (S.shape[-1],)
    return ad.concat([K, ad.broadcast_to(S, rows)], axis=-1)
