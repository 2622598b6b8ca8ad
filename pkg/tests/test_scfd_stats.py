from __future__ import annotations

import math

import numpy as np
import pytest

from scripts import errors
from scripts.scfd_stats import (
    ClusterCentroid,
    OpCounter,
    apply_reduction,
    compute_cutoff,
    contributions,
    erf,
    erfc,
    erfinv,
    estimate_centroid,
    fit_reduction,
    mahalanobis,
    mahalanobis_rows,
)


def _centroid(mean, inv_cov):
    mean = np.asarray(mean, dtype=float)
    return ClusterCentroid(mean, np.asarray(inv_cov, dtype=float), 1)


# --- reduction ---

def test_fit_reduction_splits_constant_columns():
    r = fit_reduction(np.array([[1, 5], [2, 5]]))
    assert (r.kept, r.merged, r.residual_expected) == ((0,), (1,), 5)


def test_fit_reduction_all_constant():
    r = fit_reduction(np.array([[1, 1], [1, 1]]))
    assert (r.kept, r.merged, r.residual_expected) == ((), (0, 1), 2)


def test_fit_reduction_partitions_every_index():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 3, size=(20, 8))
    X[:, 3] = 4
    r = fit_reduction(X)
    assert set(r.kept).isdisjoint(r.merged)
    assert sorted(r.kept + r.merged) == list(range(8))
    assert 3 in r.merged


def test_workload_reduction_fourteen_to_ten(training_set):
    r = fit_reduction(training_set)
    names = training_set.alphabet.names
    assert (r.dim, r.reduced_dim) == (14, 10)
    assert sorted(names[i] for i in r.merged) == ["brk", "futex", "rt_sigreturn", "sendto"]
    assert r.residual_expected == 6


@pytest.mark.parametrize("kept, merged, x, expected", [
    ((0,), (1,), [3, 5], ([3.0], 5)),
    ((0, 1), (), [3, 5], ([3.0, 5.0], 0)),
    ((0, 2), (1,), [2, 5, 1], ([2.0, 1.0], 5)),
])
def test_apply_reduction(kept, merged, x, expected):
    from scripts.scfd_stats import DimReduction
    r = DimReduction(kept, merged, 0, len(x))
    reduced, residual = apply_reduction(r, np.array(x))
    assert reduced.tolist() == expected[0]
    assert residual == expected[1]


def test_apply_reduction_dimension_mismatch():
    r = fit_reduction(np.array([[1, 5], [2, 5]]))
    with pytest.raises(errors.DimensionMismatch):
        apply_reduction(r, np.array([1, 2, 3]))


# --- centroids ---

def test_estimate_centroid_square():
    c = estimate_centroid([[0, 0], [2, 0], [0, 2], [2, 2]], ridge=0.0)
    assert c.mean.tolist() == [1.0, 1.0]
    np.testing.assert_allclose(c.inv_cov, 0.75 * np.eye(2), atol=1e-12)
    assert c.member_count == 4


def test_estimate_centroid_single_row_is_regularized():
    c = estimate_centroid([[5.0]], ridge=1e-6)
    assert c.mean.tolist() == [5.0]
    np.testing.assert_allclose(c.inv_cov, [[1e6]], rtol=1e-9)


def test_estimate_centroid_constant_coordinate():
    c = estimate_centroid([[1, 3], [2, 3], [4, 3]], ridge=1e-6)
    assert np.isfinite(c.inv_cov).all()
    np.testing.assert_allclose(c.inv_cov, c.inv_cov.T, rtol=1e-9)
    np.linalg.cholesky(c.inv_cov)


def test_estimate_centroid_singular_without_ridge():
    with pytest.raises(errors.SingularCovariance):
        estimate_centroid([[1, 3], [2, 3]], ridge=0.0)


# --- distance ---

def test_mahalanobis_examples():
    assert mahalanobis(_centroid([1, 2], np.eye(2)), [1, 2]) == 0.0
    assert mahalanobis(_centroid([0, 0], np.eye(2)), [3, 4]) == pytest.approx(5.0, abs=1e-12)
    assert mahalanobis(_centroid([0, 0], np.diag([0.25, 1.0])), [2, 1]) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_mahalanobis_dimension_mismatch():
    with pytest.raises(errors.DimensionMismatch):
        mahalanobis(_centroid([0, 0], np.eye(2)), [1, 2, 3])


def test_identity_metric_is_euclidean():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        mu, x = rng.normal(size=10), rng.normal(scale=5, size=10)
        assert abs(mahalanobis(_centroid(mu, np.eye(10)), x) - np.linalg.norm(x - mu)) <= 1e-12 * max(1.0, np.linalg.norm(x - mu))


def test_distance_invariant_to_coordinate_scaling():
    rng = np.random.default_rng(5)
    for _ in range(20):
        rows = rng.normal(size=(12, 3))
        query = rng.normal(size=3)
        s = np.array([1.0, rng.uniform(0.1, 50.0), 1.0])
        d1 = mahalanobis(estimate_centroid(rows, 0.0), query)
        d2 = mahalanobis(estimate_centroid(rows * s, 0.0), query * s)
        assert d2 == pytest.approx(d1, rel=1e-6)


def test_distance_nondecreasing_along_ray():
    rng = np.random.default_rng(9)
    c = estimate_centroid(rng.normal(size=(30, 4)), 1e-6)
    v = rng.normal(size=4)
    ds = [mahalanobis(c, c.mean + t * v) for t in np.linspace(0, 10, 50)]
    assert all(b >= a for a, b in zip(ds, ds[1:]))


def test_vectorized_distances_match():
    rng = np.random.default_rng(1)
    c = estimate_centroid(rng.normal(size=(25, 4)))
    X = rng.normal(size=(10, 4))
    np.testing.assert_allclose(mahalanobis_rows(c, X), [mahalanobis(c, x) for x in X], rtol=1e-12)


def test_contributions_sum_to_squared_distance():
    rng = np.random.default_rng(2)
    c = estimate_centroid(rng.normal(size=(25, 5)))
    x = rng.normal(size=5)
    assert contributions(c, x).sum() == pytest.approx(mahalanobis(c, x) ** 2, rel=1e-10)


def test_op_counter_is_quadratic():
    counter = OpCounter()
    mahalanobis(_centroid(np.zeros(10), np.eye(10)), np.ones(10), counter)
    assert counter.madds == 110


# --- erf and cutoff ---

@pytest.mark.parametrize("x", [0.0, 1e-8, 0.1, 0.5, 1.0, 1.7, 2.4, 2.5, 2.6, 3.3, 4.5, -0.7, -3.0])
def test_erf_matches_math(x):
    assert erf(x) == pytest.approx(math.erf(x), abs=1e-13)
    assert erfc(x) == pytest.approx(math.erfc(x), rel=1e-11, abs=1e-15)


@pytest.mark.parametrize("y", [0.0, 0.1, 0.5, 0.9, 0.99, 0.999, -0.6])
def test_erfinv_inverts_erf(y):
    assert erf(erfinv(y)) == pytest.approx(y, abs=1e-13)


def test_cutoff_values():
    assert compute_cutoff(0.05).theta == pytest.approx(1.95996, abs=1e-4)
    assert compute_cutoff(0.01).theta == pytest.approx(2.57583, abs=1e-4)
    assert compute_cutoff(1.0).theta == 0.0


def test_cutoff_forward_identity_and_monotone():
    grid = np.round(np.arange(0.001, 1.0, 0.001), 3)
    thetas = [compute_cutoff(float(p)).theta for p in grid]
    for p, theta in zip(grid, thetas):
        assert erf(0.707107 * theta) == pytest.approx(1 - p, abs=1e-6)
    assert all(a > b for a, b in zip(thetas, thetas[1:]))


@pytest.mark.parametrize("p0", [0.0, -0.1, 1.5])
def test_cutoff_out_of_range(p0):
    with pytest.raises(errors.OutOfRange):
        compute_cutoff(p0)
