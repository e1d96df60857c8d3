import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cp3.errors import BoundsError, DegenerateInputError, EmptyInputError, ParseError, ValidationError
from cp3.geometry import (
    PointCloud,
    SpatialIndex,
    derive_seed,
    farthest_point_indices,
    farthest_point_sample,
    knn,
    knn_brute,
    knn_graph,
    load_xyz,
    make_rng,
    normalize_unit_sphere,
    save_xyz,
)

coords = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def write(tmp_path, text, name="c.xyz"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_plain(tmp_path):
    c = load_xyz(write(tmp_path, "0 0 0\n1 0 0"))
    assert c.category is None
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 0, 0]])


def test_load_category_header(tmp_path):
    c = load_xyz(write(tmp_path, "#category 3\n0 0 1"))
    assert c.category == 3 and len(c) == 1


def test_load_malformed_reports_line(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        load_xyz(write(tmp_path, "a b c"))
    with pytest.raises(ParseError, match="line 2"):
        load_xyz(write(tmp_path, "0 0 0\n1 2\n"))


def test_load_empty(tmp_path):
    with pytest.raises(EmptyInputError):
        load_xyz(write(tmp_path, "\n\n"))


def test_save_single_origin(tmp_path):
    p = tmp_path / "o.xyz"
    save_xyz(PointCloud([[0.0, 0.0, 0.0]]), p)
    assert p.read_text() == "0 0 0\n"
    save_xyz(PointCloud([[0.0, 0.0, 0.0]], 2), p)
    assert p.read_text() == "#category 2\n0 0 0\n"


def test_round_trip_bitwise(tmp_path):
    pts = make_rng(5).normal(size=(100, 3)) * 10 ** make_rng(6).uniform(-8, 8, size=(100, 3))
    p = tmp_path / "r.xyz"
    save_xyz(PointCloud(pts, 1), p)
    back = load_xyz(p)
    assert back == PointCloud(pts, 1)


def test_save_unwritable(tmp_path):
    with pytest.raises(OSError):
        save_xyz(PointCloud([[0, 0, 0]]), tmp_path / "missing" / "x.xyz")


def test_nonfinite_rejected():
    with pytest.raises(ValidationError):
        PointCloud([[0, np.nan, 0]])


@pytest.mark.parametrize(
    "pts, expected",
    [
        ([[1, 0, 0], [3, 0, 0]], [[-1, 0, 0], [1, 0, 0]]),
        ([[0, 0, 0], [0, 0, 4]], [[0, 0, -1], [0, 0, 1]]),
    ],
)
def test_normalize_examples(pts, expected):
    np.testing.assert_array_equal(normalize_unit_sphere(PointCloud(pts)).points, expected)


def test_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        normalize_unit_sphere(PointCloud([[1, 2, 3]] * 4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)), elements=coords))
def test_normalize_invariants_and_idempotence(pts):
    if np.ptp(pts, axis=0).max() < 1e-6:
        return
    n = normalize_unit_sphere(PointCloud(pts))
    norms = np.linalg.norm(n.points, axis=1)
    assert abs(norms.max() - 1) <= 1e-12
    assert np.linalg.norm(n.points.mean(axis=0)) <= 1e-12
    again = normalize_unit_sphere(n)
    assert np.abs(again.points - n.points).max() <= 1e-12


def test_knn_examples():
    idx = SpatialIndex(PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0]]))
    assert list(knn(idx, [0, 0, 0], 2)) == [0, 1]
    tie = SpatialIndex(PointCloud([[1, 0, 0], [-1, 0, 0], [0, 5, 0]]))
    assert list(knn(tie, [0, 0, 0], 2)) == [0, 1]
    with pytest.raises(BoundsError):
        knn(idx, [0, 0, 0], 4)


def test_knn_matches_exhaustive_500():
    rng = make_rng(11)
    pts = rng.normal(size=(500, 3))
    index = SpatialIndex(pts)
    for q in rng.normal(size=(20, 3)):
        assert np.array_equal(knn(index, q, 24), knn_brute(pts, q, 24))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1), st.booleans())
def test_knn_property(n, seed, quantize):
    rng = make_rng(seed)
    pts = rng.normal(size=(n, 3))
    if quantize:
        pts = np.round(pts)  # many exact ties
    k = int(rng.integers(1, n + 1))
    q = np.round(rng.normal(size=3)) if quantize else rng.normal(size=3)
    assert np.array_equal(knn(SpatialIndex(pts), q, k), knn_brute(pts, q, k))


def test_knn_graph_rows_match_brute():
    pts = np.round(make_rng(3).normal(size=(2, 30, 3)), 1)
    g = knn_graph(pts, 5)
    for b in range(2):
        for j in range(30):
            assert np.array_equal(g[b, j], knn_brute(pts[b], pts[b, j], 5))


def test_fps_examples():
    line = PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert list(farthest_point_indices(line.points, 2, 0, start=0)) == [0, 3]
    full = farthest_point_sample(line, 4, seed=9)
    assert sorted(map(tuple, full.points)) == sorted(map(tuple, line.points))
    with pytest.raises(BoundsError):
        farthest_point_sample(line, 5, 0)


def test_fps_deterministic_and_spread():
    rng = make_rng(21)
    pts = rng.uniform(size=(256, 3))
    a = farthest_point_indices(pts, 64, 4)
    assert np.array_equal(a, farthest_point_indices(pts, 64, 4))
    assert len(set(a.tolist())) == 64

    def min_pair(idx):
        sub = pts[idx]
        d = np.linalg.norm(sub[:, None] - sub[None], axis=-1)
        return d[np.triu_indices(len(idx), 1)].min()

    random_mins = [min_pair(rng.choice(256, 64, replace=False)) for _ in range(100)]
    assert min_pair(a) >= np.mean(random_mins)


def test_rng_replay_and_streams():
    a = make_rng(7, 1).normal(size=5)
    assert np.array_equal(a, make_rng(7, 1).normal(size=5))
    assert not np.array_equal(a, make_rng(7, 2).normal(size=5))
    assert derive_seed(3, 4) == derive_seed(3, 4)
    with pytest.raises(ValidationError):
        make_rng(-1)
