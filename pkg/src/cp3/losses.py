"""Differentiable Chamfer loss.

Nearest-neighbour assignments are computed on the current values (and logged as
branch decisions); the loss is then an ordinary differentiable function of the
gathered coordinates. Matches :func:`cp3.metrics.chamfer_l2` in value.
"""

from __future__ import annotations

import numpy as np

from cp3 import autodiff as ad
from cp3.autodiff import Tensor
from cp3.errors import ShapeError
from cp3.metrics import nearest_indices


def _sq_rows(d: Tensor) -> Tensor:
    return ad.sum_reduce(d * d, axis=-1)


def chamfer_l2_loss(pred, gt) -> Tensor:
    """Batch-mean CD-L2 between (B, N, 3) predictions and (B, M, 3) targets."""
    pred, gt = ad._as_tensor(pred), ad._as_tensor(gt)
    if pred.ndim == 2:
        pred, gt = ad.expand_dims(pred, 0), ad.expand_dims(gt, 0)
    if pred.ndim != 3 or gt.ndim != 3 or pred.shape[0] != gt.shape[0] or pred.shape[-1] != 3 or gt.shape[-1] != 3:
        raise ShapeError("chamfer_l2_loss", f"expected (B, N, 3) and (B, M, 3), got {pred.shape} and {gt.shape}")
    pv, gv = pred.value, gt.value
    to_gt = np.stack([nearest_indices(p, g) for p, g in zip(pv, gv)])
    to_pred = np.stack([nearest_indices(g, p) for p, g in zip(pv, gv)])
    ad.record_decision(to_gt)
    ad.record_decision(to_pred)
    forward_term = ad.mean(_sq_rows(pred - ad.gather(gt, to_gt)))
    backward_term = ad.mean(_sq_rows(gt - ad.gather(pred, to_pred)))
    return forward_term + backward_term
