import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cp3 import autodiff as ad
from cp3.blocks import MlpParams, init_attention, init_mlp, mlp_forward, pointnet_global, vector_attention
from cp3.errors import BoundsError, ShapeError, ValidationError
from cp3.geometry import make_rng
from cp3.sgm import (
    SgmParams,
    affination_apply,
    build_filter,
    check_one_hot,
    concat_condition,
    filter_from_scales,
    init_affination,
    init_sgm,
    one_hot,
    sgm_apply,
)


def val(t):
    return t.value if hasattr(t, "value") else np.asarray(t)


def ident_mlp(width, act="none"):
    return MlpParams([np.eye(width)], [np.zeros(width)], [act])


def test_mlp_examples():
    X = make_rng(1).normal(size=(5, 3))
    np.testing.assert_array_equal(val(mlp_forward(ident_mlp(3), X)), X)
    np.testing.assert_array_equal(val(mlp_forward(ident_mlp(3, "relu"), X)), np.maximum(X, 0))
    with pytest.raises(ShapeError):
        mlp_forward(ident_mlp(4), X)


def test_pointnet_permutation_invariant():
    rng = make_rng(2)
    p = init_mlp(rng, [3, 8, 16])
    X = rng.normal(size=(30, 3))
    a = val(pointnet_global(p, X))
    b = val(pointnet_global(p, X[rng.permutation(30)]))
    assert a.shape == (1, 16)
    np.testing.assert_array_equal(a, b)


def _attention_setup(seed=3, n=12, width=4, k=4):
    rng = make_rng(seed)
    p = init_attention(rng, width, width, width, k)
    return p, rng.uniform(-1, 1, (n, 3)), rng.normal(size=(n, width)), rng.normal(size=(n, width))


def test_attention_k1_is_self_term():
    p, P, Q, K = _attention_setup(k=1)
    Kt = ad.constant(K)
    v = ad.matmul(Kt, ad.constant(p.wv))
    pos0 = mlp_forward(p.pos, np.zeros((P.shape[0], 3)))
    expected = Q + val(mlp_forward(p.out, v + pos0))
    np.testing.assert_allclose(val(vector_attention(p, P, Q, K)), expected, rtol=1e-12, atol=1e-12)


def test_attention_permutation_equivariant():
    p, P, Q, K = _attention_setup(n=15)
    perm = make_rng(9).permutation(15)
    a = val(vector_attention(p, P, Q, K))[perm]
    b = val(vector_attention(p, P[perm], Q[perm], K[perm]))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_attention_bounds_and_shapes():
    p, P, Q, K = _attention_setup(n=3, k=4)
    with pytest.raises(BoundsError):
        vector_attention(p, P, Q, K)
    p, P, Q, K = _attention_setup()
    with pytest.raises(ShapeError):
        vector_attention(p, P[:5], Q, K)


def test_one_hot():
    np.testing.assert_array_equal(one_hot(2, 4), [0, 0, 1, 0])
    with pytest.raises(ValidationError):
        one_hot(4, 4)
    with pytest.raises(ValidationError):
        check_one_hot([0.5, 0.5])


def test_filter_examples():
    A = np.array([[3.0, 0.0], [4.0, 1.0]])
    W = val(filter_from_scales(A, ad.constant(np.ones(2)), 0.0))
    np.testing.assert_allclose(W, [[0.6, 0.0], [0.8, 1.0]], rtol=1e-15)
    # the scales act on rows before the column normalisation
    W2 = val(filter_from_scales(A, ad.constant(np.array([0.0, 1.0])), 0.0))
    np.testing.assert_allclose(W2, [[0, 0], [1, 1]], rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100.0))
def test_filter_invariant_to_global_scale(seed, c):
    rng = make_rng(seed)
    A = rng.uniform(0.5, 1.5, (5, 4)) * rng.choice([-1, 1], (5, 4))
    s = rng.uniform(0.5, 2.0, 5)
    W1 = val(filter_from_scales(A, ad.constant(s), 0.0))
    W2 = val(filter_from_scales(A, ad.constant(c * s), 0.0))
    np.testing.assert_allclose(W1, W2, rtol=1e-12, atol=1e-14)
    # unit columns up to eps
    np.testing.assert_allclose((W1 ** 2).sum(axis=0), 1.0, rtol=1e-12)


def test_sgm_apply_matches_loop_oracle():
    rng = make_rng(5)
    params = init_sgm(rng, 3, 4, 5)
    S = np.eye(3)[[0, 2]]
    K = rng.normal(size=(2, 6, 4))
    W = val(build_filter(params, S))
    out = val(sgm_apply(K, build_filter(params, S)))
    oracle = np.zeros((2, 6, 5))
    for b in range(2):
        for n in range(6):
            for q in range(5):
                oracle[b, n, q] = sum(K[b, n, p] * W[b, p, q] for p in range(4))
    np.testing.assert_allclose(out, oracle, rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_sgm_linear_in_features(seed, a, b):
    rng = make_rng(seed)
    params = init_sgm(rng, 3, 4, 4)
    W = build_filter(params, one_hot(1, 3))
    K1, K2 = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    lhs = val(sgm_apply(a * K1 + b * K2, W))
    rhs = a * val(sgm_apply(K1, W)) + b * val(sgm_apply(K2, W))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_sgm_rejects_bad_eps_and_width():
    with pytest.raises(ValidationError):
        init_sgm(make_rng(0), 3, 4, 4, eps=0.0)
    params = init_sgm(make_rng(0), 3, 4, 4)
    with pytest.raises(ShapeError):
        build_filter(params, np.ones(2))
    with pytest.raises(ShapeError):
        sgm_apply(np.ones((3, 5)), build_filter(params, one_hot(0, 3)))


def test_affination_examples():
    p = init_affination(make_rng(6), 2, 3)
    p.sigma = ident_mlp(3)
    p.alpha = MlpParams([np.zeros((2, 3))], [np.full(3, 2.0)], ["none"])
    p.beta = MlpParams([np.zeros((2, 3))], [np.full(3, 1.0)], ["none"])
    K = make_rng(7).normal(size=(4, 3))
    np.testing.assert_allclose(val(affination_apply(K, one_hot(0, 2), p)), 2 * K + 1, rtol=1e-15)


def test_concat_condition():
    K = np.arange(6.0).reshape(3, 2)
    out = val(concat_condition(K, np.array([0.0, 1.0, 0.0])))
    assert out.shape == (3, 5)
    np.testing.assert_array_equal(out[:, :2], K)
    np.testing.assert_array_equal(out[:, 2:], np.tile([0, 1, 0], (3, 1)))


def test_filter_small_examples_and_zero_column():
    W = val(filter_from_scales(np.array([[1.0], [1.0]]), ad.constant(np.ones(2)), 1e-300))
    np.testing.assert_allclose(W, [[2 ** -0.5], [2 ** -0.5]], rtol=1e-15)
    W = val(filter_from_scales(np.array([[1.0], [1.0]]), ad.constant(np.array([2.0, 0.0])), 1e-300))
    np.testing.assert_allclose(W, [[1.0], [0.0]], rtol=1e-15)
    W = val(filter_from_scales(np.ones((3, 2)), ad.constant(np.zeros(3)), 1e-8))
    assert np.all(np.isfinite(W)) and np.all(W == 0)


def test_distinct_labels_give_distinct_filters():
    params = init_sgm(make_rng(8), 4, 5, 5)
    W0, W1 = val(build_filter(params, one_hot(0, 4))), val(build_filter(params, one_hot(3, 4)))
    assert np.linalg.norm(W0 - W1) > 0


def test_affination_zero_alpha_gives_beta():
    p = init_affination(make_rng(9), 2, 3)
    p.alpha = MlpParams([np.zeros((2, 3))], [np.zeros(3)], ["none"])
    beta = val(mlp_forward(p.beta, one_hot(1, 2)[None]))
    out = val(affination_apply(make_rng(1).normal(size=(4, 3)), one_hot(1, 2), p))
    np.testing.assert_array_equal(out, np.broadcast_to(beta, (4, 3)))
