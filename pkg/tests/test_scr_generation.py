import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cp3.blocks import init_mlp
from cp3.errors import ShapeError, ValidationError
from cp3.generation import complete, decode_coarse, encode, init_generator, pad_by_duplication, point_features
from cp3.geometry import make_rng
from cp3.scr import (
    ScrConfig,
    init_scr,
    labels_to_onehot,
    output_sizes,
    pointwise_split,
    relabel,
    repeat_points,
    scr_forward,
)


def val(t):
    return t.value if hasattr(t, "value") else np.asarray(t)


def small_cfg(**kw):
    base = dict(num_categories=3, gen_width=6, global_width=6, channels=4, multipliers=(1, 2), k_list=(2, 4))
    base["sgm_units"] = (True,) * len(kw.get("multipliers", base["multipliers"]))
    return ScrConfig(**{**base, **kw})


def inputs(n=10, cfg=None, seed=0):
    cfg = cfg or small_cfg()
    rng = make_rng(seed)
    return (
        rng.uniform(-1, 1, (1, n, 3)),
        rng.normal(size=(1, n, cfg.gen_width)),
        rng.normal(size=(1, 1, cfg.global_width)),
        np.eye(cfg.num_categories)[[1]],
    )


def test_split_locality():
    rng = make_rng(1)
    p = init_mlp(rng, [4, 12])
    H = rng.normal(size=(5, 4))
    Y = val(pointwise_split(H, 3, p))
    H2 = H.copy()
    H2[2] += 1.0
    Y2 = val(pointwise_split(H2, 3, p))
    changed = np.flatnonzero(np.any(Y != Y2, axis=1))
    np.testing.assert_array_equal(changed, [6, 7, 8])
    with pytest.raises(ShapeError):
        pointwise_split(H, 2, p)


def test_repeat_points_order():
    P = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(val(repeat_points(P, 2)), P[[0, 0, 1, 1]])


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.integers(4, 9))
def test_cardinality(mults, n):
    cfg = small_cfg(multipliers=tuple(mults), sgm_units=(True,) * len(mults))
    outs = scr_forward(init_scr(cfg, 0), *inputs(n, cfg))
    assert [o.shape[1] for o in outs] == output_sizes(cfg, n)


def test_fresh_units_are_identity_or_duplication():
    cfg = small_cfg(multipliers=(1, 2))
    coarse, pw, g, S = inputs(8, cfg)
    outs = scr_forward(init_scr(cfg, 0), coarse, pw, g, S)
    np.testing.assert_array_equal(val(outs[0]), coarse)
    np.testing.assert_array_equal(val(outs[1]), np.repeat(coarse, 2, axis=1))


def test_labels_change_output_and_random_mode():
    cfg = small_cfg()
    net = init_scr(cfg, 0)
    rng = make_rng(3)
    for unit in net.units:
        unit.delta = init_mlp(rng, [cfg.channels, 3])
    coarse, pw, g, _ = inputs(8, cfg)
    a = val(scr_forward(net, coarse, pw, g, np.eye(3)[[0]])[-1])
    b = val(scr_forward(net, coarse, pw, g, np.eye(3)[[1]])[-1])
    assert not np.array_equal(a, b)
    r = val(scr_forward(net, coarse, pw, g, np.eye(3)[[0]], label_mode="random", seed=5)[-1])
    assert not np.array_equal(a, r)
    with pytest.raises(ValidationError):
        scr_forward(net, coarse, pw, g, np.eye(3)[[0]], label_mode="shuffled")
    with pytest.raises(ShapeError):
        scr_forward(net, coarse, pw, g, np.eye(4)[[0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_relabel_always_differs(c, seed):
    labels = make_rng(seed).integers(0, c, size=50)
    new = relabel(labels, c, seed)
    assert np.all(new != labels) and np.all((0 <= new) & (new < c))
    np.testing.assert_array_equal(relabel(labels, c, seed), new)


def test_relabel_single_class_and_onehot():
    np.testing.assert_array_equal(relabel(np.zeros(4, int), 1, 0), np.zeros(4))
    np.testing.assert_array_equal(labels_to_onehot([1, 0], 2), [[0, 1], [1, 0]])
    with pytest.raises(ValidationError):
        labels_to_onehot([2], 2)


def test_config_validation():
    for bad in (
        dict(multipliers=(0, 1)),
        dict(k_list=(4, 4)),
        dict(modulation="film"),
        dict(semantics="text"),
        dict(sgm_units=(True,)),
        dict(num_categories=0),
    ):
        with pytest.raises(ValidationError):
            small_cfg(**bad)


def test_alternative_modulations_run():
    for modulation in ("affination", "concat", "none"):
        for semantics in ("category", "global", "category+global"):
            cfg = small_cfg(modulation=modulation, semantics=semantics)
            outs = scr_forward(init_scr(cfg, 0), *inputs(8, cfg))
            assert outs[-1].shape == (1, 16, 3)


def test_generator_permutation_invariance_and_shapes():
    gen = init_generator(0, num_coarse=16, encoder_dims=(8, 12), decoder_hidden=(20,))
    X = make_rng(4).normal(size=(30, 3))
    a = val(complete(gen, X))
    assert a.shape == (16, 3)
    np.testing.assert_array_equal(a, val(complete(gen, X[make_rng(5).permutation(30)])))
    glob, pw = encode(gen, X[None])
    assert glob.shape == (1, 1, 12) and pw.shape == (1, 30, 12)
    np.testing.assert_array_equal(val(point_features(gen, X)), val(pw)[0])


def test_generator_single_point_and_zero_decoder():
    gen = init_generator(1, num_coarse=4, encoder_dims=(5,), decoder_hidden=(6,))
    assert val(complete(gen, np.zeros((1, 3)))).shape == (4, 3)
    gen.decoder.weights = [np.zeros_like(w) for w in gen.decoder.weights]
    gen.decoder.biases = [np.zeros_like(b) for b in gen.decoder.biases]
    np.testing.assert_array_equal(val(complete(gen, make_rng(2).normal(size=(9, 3)))), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        complete(gen, np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        decode_coarse(gen, np.zeros((1, 7)))


def test_padding_keeps_global_feature():
    gen = init_generator(0, num_coarse=4, encoder_dims=(6,), decoder_hidden=(5,))
    X = make_rng(6).normal(size=(7, 3))
    Xp = pad_by_duplication(X, 12, make_rng(7))
    assert Xp.shape == (12, 3)
    np.testing.assert_array_equal(Xp[:7], X)
    np.testing.assert_array_equal(val(encode(gen, X)[0]), val(encode(gen, Xp)[0]))
    with pytest.raises(ValueError):
        pad_by_duplication(X, 3, make_rng(0))
