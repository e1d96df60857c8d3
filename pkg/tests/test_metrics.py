import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cp3.errors import EmptyInputError, ValidationError
from cp3.geometry import PointCloud, make_rng
from cp3.metrics import (
    MetricReport,
    chamfer_l1,
    chamfer_l2,
    consistency,
    fidelity,
    fscore,
    nearest_indices,
    nearest_sq_brute,
    normalize_pair,
    precision_recall,
)

O = np.zeros((1, 3))
E1 = np.array([[1.0, 0, 0]])


def test_single_point_fixtures():
    assert chamfer_l2(O, E1) == 2.0
    assert chamfer_l1(O, E1) == 1.0
    assert fscore(O, [[5, 5, 5]], 0.01) == 0.0
    assert fidelity(O, [[0, 0, 2]]) == 2.0


def test_identity():
    X = make_rng(1).normal(size=(50, 3))
    assert chamfer_l2(X, X) == 0 and chamfer_l1(X, X) == 0 and fscore(X, X) == 1.0
    assert fidelity(X[:10], X) == 0
    assert consistency([X, X, X]) == 0


def test_fscore_two_thirds():
    gt = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    pred = np.array([[0, 0, 0], [1, 0, 0], [5, 0, 0], [6, 0, 0]], dtype=float)
    assert precision_recall(pred, gt, 0.01) == (0.5, 1.0)
    assert fscore(pred, gt, 0.01) == pytest.approx(2 / 3, abs=1e-15)


def test_consistency():
    assert consistency([O, E1]) == 2.0
    rng = make_rng(2)
    base = rng.normal(size=(40, 3))
    frames = [base + 0.01 * rng.normal(size=base.shape) for _ in range(5)]
    oracle = np.mean([chamfer_l2(frames[i], frames[i + 1], method="brute") for i in range(4)])
    assert consistency(frames) == oracle
    with pytest.raises(ValidationError):
        consistency([O])


def test_empty_and_bad_args():
    with pytest.raises(EmptyInputError):
        chamfer_l2(np.zeros((0, 3)), O)
    with pytest.raises(ValidationError):
        fscore(O, O, tau=0)
    with pytest.raises(ValidationError):
        chamfer_l2(O, O, method="gpu")


def test_fast_equals_brute_300():
    rng = make_rng(3)
    X, Y = rng.normal(size=(300, 3)), rng.normal(size=(300, 3))
    for f in (chamfer_l2, chamfer_l1, fidelity):
        assert f(X, Y, method="fast") == f(X, Y, method="brute")


clouds = st.integers(1, 120).flatmap(
    lambda n: st.integers(0, 2**32 - 1).map(lambda s: make_rng(s).normal(size=(n, 3)))
)


@settings(max_examples=60, deadline=None)
@given(clouds, clouds, st.booleans())
def test_properties(X, Y, quantize):
    if quantize:
        X, Y = np.round(X, 1), np.round(Y, 1)
    assert chamfer_l2(X, Y) == chamfer_l2(Y, X)
    assert chamfer_l1(X, Y) == chamfer_l1(Y, X)
    assert fscore(X, Y, 0.2) == fscore(Y, X, 0.2)
    shift = np.array([3.0, -2.0, 0.5])
    assert chamfer_l2(X + shift, Y + shift) == pytest.approx(chamfer_l2(X, Y), abs=1e-12)
    # Jensen per direction: mean(d)^2 <= mean(d^2)
    for a, b in ((X, Y), (Y, X)):
        d2 = nearest_sq_brute(a, b)
        assert np.mean(np.sqrt(d2)) ** 2 <= np.mean(d2) * (1 + 1e-12)
    for f in (chamfer_l2, chamfer_l1, fidelity):
        assert f(X, Y, method="fast") == f(X, Y, method="brute")


def test_nearest_indices_lowest_on_ties():
    dst = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    assert nearest_indices(np.zeros((1, 3)), dst)[0] == 0
    rng = make_rng(4)
    src, dst = np.round(rng.normal(size=(50, 3))), np.round(rng.normal(size=(60, 3)))
    d2 = ((src[:, None] - dst[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(nearest_indices(src, dst), d2.argmin(axis=1))


def test_normalize_pair_uses_gt_transform():
    gt = PointCloud([[1, 0, 0], [3, 0, 0]])
    pred = PointCloud([[2, 0, 0]])
    p, g = normalize_pair(pred, gt)
    np.testing.assert_array_equal(g, [[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(p, [[0, 0, 0]])


def test_report_weighted_mean_and_formats():
    rows = [{"cd_l1": 0.001, "cd_l2": 0.0002, "fscore": 0.5}, {"cd_l1": 0.003, "cd_l2": 0.0004, "fscore": 1.0},
            {"cd_l1": 0.002, "cd_l2": 0.0001, "fscore": 0.0}]
    rep = MetricReport.from_samples(["b", "b", "a"], rows)
    assert rep.counts == {"a": 1, "b": 2}
    for k in ("cd_l1", "cd_l2", "fscore"):
        w = sum(rep.counts[c] * rep.per_category[c][k] for c in rep.counts) / 3
        assert abs(rep.overall[k] - w) <= 1e-12
    csv = rep.to_csv().splitlines()
    assert csv[0] == "category,count,cd_l1(x1e3),cd_l2(x1e4),fscore@1%"
    assert csv[1] == "a,1,2.0000,1.0000,0.0000"
    assert csv[-1].startswith("overall,3,")
    text = rep.to_text().splitlines()
    assert text[0].split() == ["category", "count", "cd_l1(x1e3)", "cd_l2(x1e4)", "fscore@1%"]
    assert len({len(line) for line in text}) == 1
