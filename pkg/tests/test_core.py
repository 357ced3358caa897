import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmcut.core import (InvalidInputError, PointCloud, knn_indices, normalize_unit_sphere, one_hot,
                        pairwise_sq_dist, rng_stream)


def test_normalize_symmetric_pair():
    out = normalize_unit_sphere(PointCloud([[2, 0, 0], [-2, 0, 0]]))
    np.testing.assert_array_equal(out.points, [[1, 0, 0], [-1, 0, 0]])


def test_normalize_single_point_goes_to_origin():
    out = normalize_unit_sphere(PointCloud([[5, 5, 5]]))
    np.testing.assert_array_equal(out.points, [[0, 0, 0]])


def test_normalize_random_cloud():
    pts = rng_stream(3).normal(size=(32, 3)) * 4 + 7
    out = normalize_unit_sphere(PointCloud(pts)).points
    assert abs(np.linalg.norm(out, axis=1).max() - 1) <= 1e-12
    assert np.linalg.norm(out.mean(axis=0)) <= 1e-12


def test_non_finite_rejected():
    with pytest.raises(InvalidInputError):
        PointCloud([[np.nan, 0, 0]])
    cloud = PointCloud([[0.0, 0, 0]])
    cloud.points[0, 0] = np.inf
    with pytest.raises(InvalidInputError):
        normalize_unit_sphere(cloud)


def test_point_labels_length_checked():
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((3, 3)), 0, [0, 1])


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=finite))
def test_normalize_idempotent(pts):
    once = normalize_unit_sphere(PointCloud(pts))
    twice = normalize_unit_sphere(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12)


@pytest.mark.parametrize("label,n,expected", [(2, 4, [0, 0, 1, 0]), (0, 1, [1])])
def test_one_hot(label, n, expected):
    np.testing.assert_array_equal(one_hot(label, n), expected)


def test_one_hot_out_of_range():
    with pytest.raises(InvalidInputError):
        one_hot(3, 3)
    with pytest.raises(InvalidInputError):
        one_hot(-1, 3)


def test_pairwise_small():
    a = np.array([[0.0], [3.0]])
    np.testing.assert_array_equal(pairwise_sq_dist(a, a), [[0, 9], [9, 0]])


def test_pairwise_against_loops():
    rng = rng_stream(11)
    a, b = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    naive = np.array([[sum((a[i, t] - b[j, t]) ** 2 for t in range(4)) for j in range(8)] for i in range(8)])
    np.testing.assert_allclose(pairwise_sq_dist(a, b), naive, atol=1e-12)
    d = pairwise_sq_dist(a, a)
    assert np.all(np.diag(d) == 0)
    np.testing.assert_array_equal(d, d.T)
    assert np.all(d >= 0)


def test_pairwise_dim_mismatch():
    with pytest.raises(InvalidInputError):
        pairwise_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))


def test_rng_replay_and_independence():
    a = rng_stream(42, "mask").random(100)
    b = rng_stream(42, "mask").random(100)
    c = rng_stream(42, "shuffle").random(100)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_knn_indices_matches_stable_sort_with_ties():
    rng = rng_stream(5)
    for _ in range(200):
        d = rng.integers(0, 4, size=(2, 12, 12)).astype(float)
        k = int(rng.integers(1, 11))
        dd = d.copy()
        dd[..., np.arange(12), np.arange(12)] = np.inf
        expected = np.argsort(dd, axis=-1, kind="stable")[..., :k]
        np.testing.assert_array_equal(knn_indices(d, k), expected)
