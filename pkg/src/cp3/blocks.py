"""Network building blocks on top of :mod:`cp3.autodiff`.

All blocks take features shaped ``(..., N, C)``; rows are points. Parameters are
dataclasses whose array leaves may be plain arrays (inference) or Tensors
(training / gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from cp3 import autodiff as ad
from cp3.autodiff import Tensor
from cp3.errors import BoundsError, ShapeError
from cp3.geometry import knn_graph


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    @property
    def dims(self) -> List[int]:
        return [int(np.shape(self.weights[0])[0])] + [int(np.shape(w)[1]) for w in self.weights]


def init_mlp(
    rng: np.random.Generator,
    dims: Sequence[int],
    final_activation: str = "none",
    hidden: str = "relu",
    final_bias: bool = True,
) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.

    ``final_bias=False`` keeps the last layer's bias at a fixed zero (stored as
    an empty array), for outputs that feed a shift-invariant op like softmax.
    """
    weights, biases, acts = [], [], []
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fi)
        last = i == len(dims) - 2
        weights.append(rng.uniform(-bound, bound, size=(fi, fo)))
        if last and not final_bias:
            biases.append(np.zeros(0))
        else:
            biases.append(rng.uniform(-bound, bound, size=(fo,)))
        acts.append(final_activation if last else hidden)
    return MlpParams(weights, biases, acts)


def zero_mlp(dims: Sequence[int], activation: str = "none") -> MlpParams:
    pairs = list(zip(dims[:-1], dims[1:]))
    return MlpParams([np.zeros(p) for p in pairs], [np.zeros(p[1]) for p in pairs], [activation] * len(pairs))


def linear(X: Tensor, W, b) -> Tensor:
    X = ad._as_tensor(X)
    Y = ad.matmul(X, W)
    if np.size(b.value if isinstance(b, Tensor) else b) == 0:
        return Y
    return Y + ad.broadcast_to(ad._as_tensor(b), Y.shape)


def mlp_forward(params: MlpParams, X) -> Tensor:
    X = ad._as_tensor(X)
    if X.shape[-1] != params.dims[0]:
        raise ShapeError("mlp", f"input width {X.shape[-1]} != first layer width {params.dims[0]}")
    for W, b, act in zip(params.weights, params.biases, params.activations):
        X = linear(X, W, b)
        if act == "relu":
            X = ad.relu(X)
        elif act != "none":
            raise ValueError(f"unknown activation {act!r}")
    return X


def pointnet_global(params: MlpParams, features) -> Tensor:
    """Per-point MLP then a channel-wise max over points: (..., N, C) -> (..., 1, G)."""
    H = mlp_forward(params, features)
    if H.shape[-2] < 1:
        raise ShapeError("pointnet_global", "need at least one point")
    return ad.expand_dims(ad.max_reduce(H, axis=-2), -2)


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    pos: MlpParams
    attn: MlpParams
    out: MlpParams
    k: int


def init_attention(rng: np.random.Generator, q_width: int, k_width: int, dim: int, k: int) -> AttentionParams:
    if k < 1:
        raise ValueError("neighbourhood size must be >= 1")

    def proj(fi):
        b = 1.0 / np.sqrt(fi)
        return rng.uniform(-b, b, size=(fi, dim))

    return AttentionParams(
        wq=proj(q_width),
        wk=proj(k_width),
        wv=proj(k_width),
        pos=init_mlp(rng, [3, dim, dim]),
        # softmax over neighbours is blind to a per-channel shift, so no final bias
        attn=init_mlp(rng, [dim, dim, dim], final_bias=False),
        out=init_mlp(rng, [dim, q_width]),
        k=k,
    )


def vector_attention(params: AttentionParams, P, Q, Kfeat) -> Tensor:
    """Neighbourhood vector attention with relative position encoding.

    For each point j and each of its k nearest neighbours n (in the coordinates
    ``P``), the per-channel logits are ``attn(q_j - key_n + pos(P_j - P_n))``;
    the softmax over neighbours weights ``value_n + pos(P_j - P_n)``. The pooled
    vector goes through the output MLP and is added back onto ``Q``.
    """
    P, Q, Kfeat = ad._as_tensor(P), ad._as_tensor(Q), ad._as_tensor(Kfeat)
    squeeze = P.ndim == 2
    if squeeze:
        P, Q, Kfeat = (ad.expand_dims(t, 0) for t in (P, Q, Kfeat))
    if not (P.shape[:2] == Q.shape[:2] == Kfeat.shape[:2]):
        raise ShapeError("vector_attention", f"row counts differ: {P.shape}, {Q.shape}, {Kfeat.shape}")
    B, N, _ = P.shape
    k = params.k
    if k > N:
        raise BoundsError(f"neighbourhood size k={k} exceeds {N} points")
    idx = knn_graph(P.value, k)
    ad.record_decision(idx)

    q = ad.matmul(Q, params.wq)
    key = ad.matmul(Kfeat, params.wk)
    val = ad.matmul(Kfeat, params.wv)
    D = q.shape[-1]

    rel = ad.broadcast_to(ad.expand_dims(P, 2), (B, N, k, 3)) - ad.gather(P, idx)
    pe = mlp_forward(params.pos, rel)
    qj = ad.broadcast_to(ad.expand_dims(q, 2), (B, N, k, D))
    logits = mlp_forward(params.attn, qj - ad.gather(key, idx) + pe)
    w = ad.softmax(logits, axis=2)
    pooled = ad.sum_reduce(w * (ad.gather(val, idx) + pe), axis=2)
    out = mlp_forward(params.out, pooled) + Q
    return ad.take(out, 0) if squeeze else out
