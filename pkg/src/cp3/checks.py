"""Small, seeded gradient-check problems for every differentiable block.

Each problem wraps a block in a scalar objective (a fixed random contraction of
its output, or a CD-L2 loss) over named inputs, so :func:`cp3.autodiff.gradcheck`
can perturb parameters and data alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np

from cp3 import autodiff as ad
from cp3.autodiff import Graph, GradcheckResult
from cp3.blocks import init_attention, init_mlp, vector_attention
from cp3.errors import ValidationError
from cp3.generation import decode_coarse, encode, init_generator
from cp3.geometry import make_rng
from cp3.losses import chamfer_l2_loss
from cp3.params import as_dict, tree_map
from cp3.scr import ScrConfig, init_scr, pointwise_split, scr_forward
from cp3.sgm import affination_apply, build_filter, init_affination, init_sgm, sgm_apply

TOL = 1e-4
LINEAR_TOL = 1e-6
STEP = 1e-4


@dataclass
class GradProblem:
    name: str
    graph: Graph
    inputs: Dict[str, np.ndarray]
    # inputs the objective depends on linearly (tighter tolerance)
    linear: Tuple[str, ...] = ()
    tol: float = TOL


def _rebuild(template, prefix: str, leaves):
    """Swap template leaves for the named input Tensors; leaves not being checked stay constant."""
    return tree_map(lambda name, leaf: leaves.get(f"{prefix}.{name}", leaf), template, with_name=True)


def _prefixed(prefix: str, tree) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in as_dict(tree).items()}


def sgm_problem(seed: int = 0, batch: int = 2, n: int = 8, channels: int = 4, categories: int = 3) -> GradProblem:
    rng = make_rng(seed, 1)
    params = init_sgm(rng, categories, channels, channels)
    S = np.eye(categories)[rng.integers(categories, size=batch)]
    R = make_rng(seed, 2)
    weights = R.normal(size=(batch, n, channels))

    def fn(K, **leaves):
        p = _rebuild(params, "sgm", leaves)
        out = sgm_apply(K, build_filter(p, S))
        return ad.sum_reduce(out * ad.constant(weights))

    inputs = {"K": rng.normal(size=(batch, n, channels)), **_prefixed("sgm", params)}
    return GradProblem("sgm", Graph(fn), inputs, linear=("K",))


def affination_problem(seed: int = 0, batch: int = 2, n: int = 8, channels: int = 4, categories: int = 3) -> GradProblem:
    rng = make_rng(seed, 1)
    params = init_affination(rng, categories, channels)
    S = np.eye(categories)[rng.integers(categories, size=batch)]
    weights = make_rng(seed, 2).normal(size=(batch, n, channels))

    def fn(K, **leaves):
        p = _rebuild(params, "aff", leaves)
        return ad.sum_reduce(affination_apply(K, S, p) * ad.constant(weights))

    inputs = {"K": rng.normal(size=(batch, n, channels)), **_prefixed("aff", params)}
    # sigma is a single linear layer, so the objective is linear in K
    return GradProblem("affination", Graph(fn), inputs, linear=("K",))


def attention_problem(seed: int = 0, n: int = 16, k: int = 4, width: int = 4) -> GradProblem:
    rng = make_rng(seed, 1)
    params = init_attention(rng, width, width, width, k)
    weights = make_rng(seed, 2).normal(size=(1, n, width))

    def fn(P, Q, Kf, **leaves):
        p = _rebuild(params, "att", leaves)
        return ad.sum_reduce(vector_attention(p, P, Q, Kf) * ad.constant(weights))

    inputs = {
        "P": rng.uniform(-1, 1, size=(1, n, 3)),
        "Q": rng.normal(size=(1, n, width)),
        "Kf": rng.normal(size=(1, n, width)),
        **_prefixed("att", params),
    }
    return GradProblem("attention", Graph(fn), inputs)


def split_problem(seed: int = 0, n: int = 6, width: int = 4, u: int = 2) -> GradProblem:
    rng = make_rng(seed, 1)
    params = init_mlp(rng, [width, u * width])
    weights = make_rng(seed, 2).normal(size=(1, u * n, width))

    def fn(H, **leaves):
        p = _rebuild(params, "split", leaves)
        return ad.sum_reduce(pointwise_split(H, u, p) * ad.constant(weights))

    inputs = {"H": rng.normal(size=(1, n, width)), **_prefixed("split", params)}
    # bilinear: linear in every single coordinate
    return GradProblem("split", Graph(fn), inputs, linear=tuple(inputs))


def tiny_scr_config(categories: int = 3) -> ScrConfig:
    return ScrConfig(
        num_categories=categories,
        gen_width=6,
        global_width=6,
        channels=4,
        multipliers=(1, 2),
        k_list=(4, 8),
        sgm_units=(True, False),
    )


def scr_problem(seed: int = 0, n: int = 16) -> GradProblem:
    """Two-unit SCR (u = 1, 2) trained against a random target with CD-L2.

    The zero-initialised displacement heads are replaced by random ones, since
    at exactly zero every upstream gradient vanishes and the check is vacuous.
    """
    cfg = tiny_scr_config()
    net = init_scr(cfg, seed)
    rng = make_rng(seed, 1)
    for unit in net.units:
        unit.delta = init_mlp(rng, [cfg.channels, 3])
    coarse = rng.uniform(-1, 1, size=(1, n, 3))
    pointwise = rng.normal(size=(1, n, cfg.gen_width))
    glob = rng.normal(size=(1, 1, cfg.global_width))
    S = np.eye(cfg.num_categories)[[1]]
    target = rng.uniform(-1, 1, size=(1, 2 * n, 3))

    def fn(**leaves):
        p = _rebuild(net, "scr", leaves)
        outs = scr_forward(p, coarse, pointwise, glob, S)
        return chamfer_l2_loss(outs[-1], target)

    return GradProblem("scr", Graph(fn), _prefixed("scr", net))


def encoder_problem(seed: int = 0, n: int = 12) -> GradProblem:
    gen = init_generator(seed, num_coarse=8, encoder_dims=(6, 5), decoder_hidden=(7,))
    rng = make_rng(seed, 1)
    wg = rng.normal(size=(1, 5))
    wp = rng.normal(size=(n, 5))

    def fn(X, **leaves):
        g = _rebuild(gen, "gen", leaves)
        glob, pw = encode(g, X)
        return ad.sum_reduce(glob * ad.constant(wg)) + ad.sum_reduce(pw * ad.constant(wp))

    inputs = {"X": rng.uniform(-1, 1, size=(n, 3)), **_prefixed("gen", gen)}
    return GradProblem("encoder", Graph(fn), inputs, tol=LINEAR_TOL)


def decoder_problem(seed: int = 0) -> GradProblem:
    gen = init_generator(seed, num_coarse=8, encoder_dims=(6, 5), decoder_hidden=(7,))
    rng = make_rng(seed, 1)
    target = rng.uniform(-1, 1, size=(10, 3))

    def fn(G, **leaves):
        g = _rebuild(gen, "gen", leaves)
        return chamfer_l2_loss(decode_coarse(g, G), target)

    inputs = {"G": rng.normal(size=(1, 5)), **{k: v for k, v in _prefixed("gen", gen).items() if "decoder" in k}}
    return GradProblem("decoder", Graph(fn), inputs, tol=1e-5)


PROBLEMS: Dict[str, Callable[..., GradProblem]] = {
    "sgm": sgm_problem,
    "affination": affination_problem,
    "attention": attention_problem,
    "split": split_problem,
    "scr": scr_problem,
    "encoder": encoder_problem,
    "decoder": decoder_problem,
}


@dataclass
class CheckOutcome:
    problem: str
    result: GradcheckResult
    linear_result: GradcheckResult | None
    tol: float

    @property
    def passed(self) -> bool:
        ok = self.result.max_rel_error <= self.tol
        if self.linear_result is not None:
            ok = ok and self.linear_result.max_rel_error <= LINEAR_TOL
        return ok


def run_check(name: str, seed: int = 0, noise_floor: bool = True) -> CheckOutcome:
    """Gradcheck one problem: 5-point stencil, step 1e-4, kinks excluded."""
    if name not in PROBLEMS:
        raise ValidationError(f"unknown gradcheck problem {name!r}; choose from {sorted(PROBLEMS)}")
    prob = PROBLEMS[name](seed)
    nonlinear = [k for k in prob.inputs if k not in prob.linear]
    res = ad.gradcheck(prob.graph, prob.inputs, h=STEP, wrt=nonlinear or list(prob.inputs), order=4, noise_floor=noise_floor)
    lin = None
    if prob.linear:
        lin = ad.gradcheck(prob.graph, prob.inputs, h=STEP, wrt=prob.linear, order=4, noise_floor=noise_floor)
    return CheckOutcome(name, res, lin, prob.tol)
