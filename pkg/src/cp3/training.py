"""Training stages (pretrain -> finetune -> refine), Adam, the lr schedule and evaluation."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cp3 import autodiff as ad
from cp3.errors import EmptyInputError, NonFiniteError, ValidationError
from cp3.generation import GenParams, decode_coarse, encode, pad_by_duplication, point_features
from cp3.geometry import PointCloud, derive_seed, farthest_point_indices, make_rng
from cp3.ioi import IoiConfig, ioi_crop, make_pretrain_pair, plane_from_rng
from cp3.losses import chamfer_l2_loss
from cp3.metrics import MetricReport, chamfer_l1, chamfer_l2, fscore, normalize_pair
from cp3.params import grads_of, to_tensors, tree_items, tree_map, values_of
from cp3.scr import ScrNet, labels_to_onehot, output_sizes, scr_forward
from cp3.synthdata import Sample

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "refine")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    decay_factor: float = 0.7
    decay_every: int = 40
    epochs: int = 0
    batch_size: int = 16
    seed: int = 0
    loss: str = "cd_l2"
    stage: str = "finetune"
    gamma: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValidationError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("decay_every, batch_size must be >= 1 and epochs >= 0")
        if self.loss != "cd_l2":
            raise ValidationError("only the cd_l2 loss is implemented")
        if self.stage not in STAGES:
            raise ValidationError(f"stage must be one of {STAGES}")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``learning_rate * decay_factor ** floor(epoch / decay_every)``."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    return cfg.learning_rate * cfg.decay_factor ** (epoch // cfg.decay_every)


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params, grads, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, state)``; ``state`` is updated in place."""
    gmap = dict(tree_items(grads))
    for name, g in gmap.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"adam: {bad} non-finite gradient entries in {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2

    def update(name, p):
        g = gmap[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValidationError(f"adam: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        return p - lr * m_hat / (np.sqrt(v_hat) + state.eps)

    return tree_map(update, params, with_name=True), state


# --------------------------------------------------------------------------- shared loop


@dataclass
class TrainResult:
    params: object
    losses: List[float]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _run(cfg: TrainConfig, params, n: int, step_loss: Callable[[object, np.ndarray, int, int], ad.Tensor]) -> TrainResult:
    """Generic epoch loop: ``step_loss(tensor_params, batch_indices, epoch, batch_no)`` builds the loss."""
    if n == 0:
        raise EmptyInputError("training set is empty")
    state = AdamState()
    losses = []
    for epoch in range(cfg.epochs):
        rng = make_rng(cfg.seed, 1000 + epoch)
        lr = lr_at(cfg, epoch)
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            tp = to_tensors(params)
            loss = step_loss(tp, idx, epoch, b)
            ad.backward(loss)
            params, state = adam_step(state, params, grads_of(tp), lr)
            total += float(loss.value) * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.info("%s epoch %d lr %.3g loss %.6g", cfg.stage, epoch, lr, losses[-1])
    return TrainResult(params, losses)


def _stack_padded(clouds: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    size = max(c.shape[0] for c in clouds)
    return np.stack([pad_by_duplication(c, size, rng) for c in clouds])


def generator_loss(gen: GenParams, inputs: np.ndarray, targets: np.ndarray) -> ad.Tensor:
    glob, _ = encode(gen, inputs)
    return chamfer_l2_loss(decode_coarse(gen, glob), targets)


# --------------------------------------------------------------------------- generation stages


class PretrainVariant(enum.Enum):
    MIRRORED_TO_COMPLETE = "mirrored->C"
    JITTERED_TO_COMPLETE = "jittered->C"
    INCOMPLETE_TO_COMPLETE = "I->C"
    INCOMPLETE_TO_INCOMPLETE = "I->I"
    IOI_TO_COMPLETE = "IOI->C"
    HYBRID_PARALLEL = "hybrid"
    IOI_TO_INCOMPLETE = "IOI->I"

    @property
    def needs_complete(self) -> bool:
        return self.value.endswith("->C")


JITTER_SIGMA = 0.01


def mirror(points: np.ndarray, axis: int) -> np.ndarray:
    """Reflect across the axis-aligned plane through the centroid normal to ``axis``."""
    out = points.copy()
    c = points[:, axis].mean()
    out[:, axis] = 2 * c - out[:, axis]
    return out


def pretext_pair(variant: PretrainVariant, sample: Sample, seed: int, batch_no: int, gamma: float):
    """(input, target) arrays for one sample under a pretraining variant."""
    inc = sample.partial
    if variant is PretrainVariant.HYBRID_PARALLEL:
        ioi, _ = make_pretrain_pair(inc, IoiConfig(gamma, seed))
        # even batches complete the IOI back to I, odd batches reconstruct the IOI itself
        return (ioi.points, inc.points) if batch_no % 2 == 0 else (ioi.points, ioi.points)
    if variant is PretrainVariant.IOI_TO_INCOMPLETE:
        ioi, target = make_pretrain_pair(inc, IoiConfig(gamma, seed))
        return ioi.points, target.points
    if variant is PretrainVariant.IOI_TO_COMPLETE:
        ioi, _ = make_pretrain_pair(inc, IoiConfig(gamma, seed))
        return ioi.points, sample.complete.points
    if variant is PretrainVariant.INCOMPLETE_TO_INCOMPLETE:
        return inc.points, inc.points
    if variant is PretrainVariant.INCOMPLETE_TO_COMPLETE:
        return inc.points, sample.complete.points
    if variant is PretrainVariant.MIRRORED_TO_COMPLETE:
        axis = int(make_rng(seed).integers(3))
        return mirror(inc.points, axis), sample.complete.points
    if variant is PretrainVariant.JITTERED_TO_COMPLETE:
        noise = make_rng(seed).normal(scale=JITTER_SIGMA, size=inc.points.shape)
        return inc.points + noise, sample.complete.points
    raise ValidationError(f"unknown variant {variant}")


def pretrain_generation(
    cfg: TrainConfig,
    variant: PretrainVariant,
    samples: Sequence[Sample],
    init: GenParams,
) -> TrainResult:
    """Self-supervised pretraining of the generator; the default pretext is IOI -> I."""
    if not samples:
        raise EmptyInputError("pretraining set is empty")
    variant = PretrainVariant(variant)

    def step(tp, idx, epoch, b):
        pairs = [pretext_pair(variant, samples[i], derive_seed(cfg.seed, epoch, int(i)), b, cfg.gamma) for i in idx]
        rng = make_rng(cfg.seed, 2000 + epoch, b)
        inputs = _stack_padded([p[0] for p in pairs], rng)
        targets = _stack_padded([p[1] for p in pairs], rng)
        return generator_loss(tp, inputs, targets)

    return _run(cfg, init, len(samples), step)


def finetune_generation(cfg: TrainConfig, samples: Sequence[Sample], init: GenParams) -> TrainResult:
    """Supervised incomplete -> complete training of the generator from ``init``."""
    if not samples:
        raise EmptyInputError("finetuning set is empty")

    def step(tp, idx, epoch, b):
        rng = make_rng(cfg.seed, 3000 + epoch, b)
        inputs = _stack_padded([samples[i].partial.points for i in idx], rng)
        targets = _stack_padded([samples[i].complete.points for i in idx], rng)
        return generator_loss(tp, inputs, targets)

    return _run(cfg, init, len(samples), step)


# --------------------------------------------------------------------------- refinement stage


@dataclass
class GeneratorOutputs:
    """Frozen generator products for a set of samples (one row per sample)."""

    coarse: np.ndarray
    pointwise: np.ndarray
    glob: np.ndarray


def run_generator(gen: GenParams, samples: Sequence[Sample]) -> GeneratorOutputs:
    coarse, pointwise, glob = [], [], []
    for s in samples:
        g, _ = encode(gen, s.partial.points)
        c = decode_coarse(gen, g)
        coarse.append(c.value)
        pointwise.append(point_features(gen, c.value).value)
        glob.append(g.value)
    return GeneratorOutputs(np.stack(coarse), np.stack(pointwise), np.stack(glob))


def resolution_targets(samples: Sequence[Sample], sizes: Sequence[int], seed: int) -> List[np.ndarray]:
    """Ground truth at every unit's output size; smaller sizes come from farthest-point sampling."""
    targets = []
    for size in sizes:
        rows = []
        for i, s in enumerate(samples):
            n = len(s.complete)
            if size > n:
                raise ValidationError(f"unit output size {size} exceeds ground-truth size {n}")
            if size == n:
                rows.append(s.complete.points)
            else:
                rows.append(s.complete.points[farthest_point_indices(s.complete.points, size, derive_seed(seed, i))])
        targets.append(np.stack(rows))
    return targets


def train_refinement(cfg: TrainConfig, samples: Sequence[Sample], gen: GenParams, net: ScrNet) -> TrainResult:
    """Train the refinement net on frozen generator features; loss = sum of per-unit CD-L2."""
    if not samples:
        raise EmptyInputError("refinement training set is empty")
    if any(s.category is None for s in samples):
        raise ValidationError("refinement training needs category labels")
    feats = run_generator(gen, samples)
    sizes = output_sizes(net.config, gen.num_coarse)
    targets = resolution_targets(samples, sizes, cfg.seed)
    onehot = labels_to_onehot([s.category for s in samples], net.config.num_categories)

    def step(tp, idx, epoch, b):
        outs = scr_forward(tp, feats.coarse[idx], feats.pointwise[idx], feats.glob[idx], onehot[idx])
        loss = chamfer_l2_loss(outs[0], targets[0][idx])
        for out, tgt in zip(outs[1:], targets[1:]):
            loss = loss + chamfer_l2_loss(out, tgt[idx])
        return loss

    return _run(cfg, net, len(samples), step)


# --------------------------------------------------------------------------- evaluation


def predict(gen: GenParams, net: Optional[ScrNet], samples: Sequence[Sample], label_mode: str = "correct", seed: int = 0):
    """Final predicted clouds (B, M', 3): the coarse output, or the last refinement unit's."""
    feats = run_generator(gen, samples)
    if net is None:
        return feats.coarse
    if any(s.category is None for s in samples):
        raise ValidationError("refinement needs category labels")
    onehot = labels_to_onehot([s.category for s in samples], net.config.num_categories)
    outs = scr_forward(net, feats.coarse, feats.pointwise, feats.glob, onehot, label_mode=label_mode, seed=seed)
    return outs[-1].value


def score(pred: np.ndarray, gt: PointCloud) -> Dict[str, float]:
    p, g = normalize_pair(PointCloud(pred), gt)
    return {"cd_l1": chamfer_l1(p, g), "cd_l2": chamfer_l2(p, g), "fscore": fscore(p, g)}


def evaluate(
    gen: Optional[GenParams],
    net: Optional[ScrNet],
    samples: Sequence[Sample],
    label_mode: str = "correct",
    seed: int = 0,
    category_names: Optional[Sequence[str]] = None,
    predictions: Optional[np.ndarray] = None,
) -> MetricReport:
    """Per-category and overall CD-L1, CD-L2 and F-score@1% on ``samples``.

    ``predictions`` bypasses the networks (used to evaluate externally produced clouds).
    """
    if not samples:
        raise EmptyInputError("evaluation set is empty")
    if label_mode not in ("correct", "random"):
        raise ValidationError(f"unknown label_mode {label_mode!r}")
    if label_mode == "random" and any(s.category is None for s in samples):
        raise ValidationError("label_mode=random needs category labels")
    if predictions is None:
        predictions = predict(gen, net, samples, label_mode, seed)
    names = [
        (category_names[s.category] if category_names is not None else str(s.category)) for s in samples
    ]
    rows = [score(p, s.complete) for p, s in zip(predictions, samples)]
    return MetricReport.from_samples(names, rows)
