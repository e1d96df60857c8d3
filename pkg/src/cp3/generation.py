"""Minimal coarse completion network: PointNet encoder + MLP decoder.

The encoder's last per-point layer gives the point-wise features; their
channel-wise max is the global feature. The decoder maps the global feature to
``M`` coordinates. Training uses CD-L2 only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from cp3 import autodiff as ad
from cp3.autodiff import Tensor
from cp3.blocks import MlpParams, init_mlp, mlp_forward
from cp3.errors import ShapeError
from cp3.geometry import make_rng


@dataclass
class GenParams:
    encoder: MlpParams
    decoder: MlpParams
    num_coarse: int

    @property
    def feature_width(self) -> int:
        return self.encoder.dims[-1]


def init_generator(
    seed: int,
    num_coarse: int = 256,
    encoder_dims: Sequence[int] = (64, 128),
    decoder_hidden: Sequence[int] = (256,),
) -> GenParams:
    rng = make_rng(seed)
    enc = init_mlp(rng, [3, *encoder_dims])
    dec = init_mlp(rng, [encoder_dims[-1], *decoder_hidden, 3 * num_coarse])
    return GenParams(enc, dec, num_coarse)


def _batched(points):
    P = ad._as_tensor(points)
    if P.ndim == 2:
        return ad.expand_dims(P, 0), True
    return P, False


def encode(params: GenParams, partial) -> Tuple[Tensor, Tensor]:
    """(global (B, 1, G), point-wise (B, N, C)); 2-d input gives (1, G) and (N, C)."""
    P, squeeze = _batched(partial)
    if P.shape[-1] != 3 or P.shape[-2] < 1:
        raise ShapeError("encode", f"expected (..., N>=1, 3) points, got {P.shape}")
    pointwise = mlp_forward(params.encoder, P)
    glob = ad.expand_dims(ad.max_reduce(pointwise, axis=-2), -2)
    if squeeze:
        return ad.take(glob, 0), ad.take(pointwise, 0)
    return glob, pointwise


def decode_coarse(params: GenParams, glob) -> Tensor:
    """Coarse cloud (B, M, 3) from a (B, 1, G) global feature; (1, G) gives (M, 3)."""
    g = ad._as_tensor(glob)
    if g.shape[-1] != params.decoder.dims[0]:
        raise ShapeError("decode_coarse", f"global width {g.shape[-1]} != {params.decoder.dims[0]}")
    flat = mlp_forward(params.decoder, g)
    lead = g.shape[:-2]
    return ad.reshape(flat, lead + (params.num_coarse, 3))


def complete(params: GenParams, partial) -> Tensor:
    glob, _ = encode(params, partial)
    return decode_coarse(params, glob)


def point_features(params: GenParams, points) -> Tensor:
    """Last-layer encoder features evaluated at arbitrary points (e.g. the coarse output)."""
    return mlp_forward(params.encoder, points)


def pad_by_duplication(points: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Grow a cloud to ``size`` rows by repeating randomly chosen existing rows.

    Max-pooled features are unchanged by duplicated rows, so this lets clouds of
    different sizes share a batch.
    """
    n = points.shape[0]
    if n == size:
        return points
    if n > size:
        raise ValueError(f"cannot pad {n} points down to {size}")
    extra = rng.integers(0, n, size=size - n)
    return np.concatenate([points, points[extra]], axis=0)
