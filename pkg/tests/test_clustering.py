from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from scripts import scfd_stats
from scripts.clustering import (
    ClusterSet,
    GkmConfig,
    assign_closest,
    global_kmeans,
    kmeans_refine,
    total_distance,
)
from scripts.scfd_stats import ClusterCentroid, estimate_centroid


def _identity(mean):
    mean = np.asarray(mean, dtype=float)
    return ClusterCentroid(mean, np.eye(mean.size), 1)


def _line_blobs(n=10):
    """Three blobs, each spread along its own direction."""
    t = np.arange(n, dtype=float)
    a = np.column_stack([t, np.zeros(n)])
    b = np.column_stack([np.full(n, 30.0), t])
    c = np.column_stack([60.0 + t, 60.0 + t])
    return np.vstack([a, b, c])


def _blobs(centers, n, scale, seed):
    rng = np.random.default_rng(seed)
    return np.vstack([rng.normal(loc=c, scale=scale, size=(n, len(c))) for c in centers])


def test_assign_closest():
    centroids = [_identity([0, 0]), _identity([10, 10])]
    assert assign_closest(centroids[:1], [3, 4]) == (0, pytest.approx(5.0))
    assert assign_closest(centroids, [1, 1])[0] == 0
    # On the bisector: lowest index wins
    assert assign_closest(centroids, [5, 5])[0] == 0
    assert assign_closest(centroids[::-1], [5, 5])[0] == 0


def test_refine_recovers_two_blobs():
    X = _blobs([(0, 0), (20, 20)], 10, 1.0, seed=3)
    cfg = GkmConfig(ridge=1e-6)
    cs = kmeans_refine(X, [estimate_centroid(X[:1]), estimate_centroid(X[10:11])], cfg)
    assert cs.converged
    assert cs.assignments.tolist() == [0] * 10 + [1] * 10


def test_refine_partition_is_optimal_for_final_centroids():
    X = _blobs([(0, 0), (20, 20)], 10, 1.0, seed=3)
    cs = kmeans_refine(X, [estimate_centroid(X[:1]), estimate_centroid(X[10:11])])
    # Every point sits with its nearest centroid, so no 2-partition can do better
    best = [min(scfd_stats.mahalanobis(c, x) for c in cs.centroids) for x in X]
    assert cs.total_distance == pytest.approx(sum(best), rel=1e-9)


def test_singletons_have_zero_total():
    X = np.array([[0.0, 1.0], [3.0, 7.0], [-2.0, 4.0], [9.0, 9.0]])
    cs = kmeans_refine(X, [estimate_centroid(X[i:i + 1]) for i in range(4)])
    assert cs.k == 4
    assert cs.total_distance == 0.0


def test_identical_rows_single_cluster():
    X = np.tile([[2.0, 3.0]], (6, 1))
    cs = kmeans_refine(X, [estimate_centroid(X)])
    assert cs.k == 1
    assert cs.total_distance == 0.0


def test_empty_clusters_are_dropped():
    X = np.array([[0.0], [0.1], [0.2]])
    far = ClusterCentroid(np.array([1000.0]), np.eye(1), 1)
    cs = kmeans_refine(X, [estimate_centroid(X), far])
    assert cs.k == 1
    assert all(c.member_count >= 1 for c in cs.centroids)
    assert set(cs.assignments.tolist()) == {0}


def test_total_distance_recomputation():
    X = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    c = estimate_centroid(X, 0.0)
    cs = ClusterSet((c,), np.zeros(4, dtype=int), 0.0)
    assert total_distance(X, cs) == pytest.approx(4 * scfd_stats.mahalanobis(c, X[0]), rel=1e-12)
    cs_id = ClusterSet((_identity([1.0, 1.0]),), np.zeros(4, dtype=int), 0.0)
    assert total_distance(X, cs_id) == pytest.approx(4 * np.sqrt(2.0))


def test_single_blob_huge_bound():
    X = _blobs([(5, 5)], 15, 0.5, seed=1)
    cs = global_kmeans(X, GkmConfig(bound_td=1e9))
    assert cs.k == 1
    assert cs.stop_reason == "bound"


def _naive_global_kmeans(X, cfg):
    """Straight transcription of the incremental algorithm without dedup or vectorization."""
    def refine(initial):
        cents = list(initial)
        assign = [assign_closest(cents, x)[0] for x in X]
        for _ in range(cfg.max_iters):
            used = sorted(set(assign))
            cents = [estimate_centroid(X[[i for i, a in enumerate(assign) if a == j]], cfg.ridge) for j in used]
            assign = [used.index(a) for a in assign]
            new = [assign_closest(cents, x)[0] for x in X]
            if new == assign:
                break
            assign = new
        return cents, sum(scfd_stats.mahalanobis(cents[a], x) for a, x in zip(assign, X))

    glob = estimate_centroid(X, cfg.ridge)
    cents, total = refine([glob])
    totals = [total]
    k = 2
    while k <= cfg.max_k and total > cfg.bound_td:
        trials = []
        for s in range(0, len(X), cfg.candidate_stride):
            seed = ClusterCentroid(X[s].copy(), glob.inv_cov, 1)
            trials.append(refine(cents + [seed]))
        cents, total = min(trials, key=lambda t: t[1])
        totals.append(total)
        k += 1
    return cents, totals


def test_three_blobs_match_naive_oracle():
    X = _blobs([(0, 0, 0), (30, 0, 10), (0, 30, -10)], 8, 1.0, seed=11)
    cfg = GkmConfig(max_k=5, bound_td=1.0, ridge=1e-6)
    cs = global_kmeans(X, cfg)
    oracle_cents, oracle_totals = _naive_global_kmeans(X, cfg)
    assert list(cs.k_totals) == pytest.approx(oracle_totals, rel=1e-9, abs=1e-9)
    assert cs.total_distance == pytest.approx(oracle_totals[-1], rel=1e-9, abs=1e-9)


def test_three_blobs_memberships():
    X = _line_blobs()
    cs = global_kmeans(X, GkmConfig(max_k=3, bound_td=0.0))
    assert cs.k == 3
    labels = cs.assignments.reshape(3, 10)
    assert all(len(set(row)) == 1 for row in labels)
    assert len({row[0] for row in labels}) == 3
    assert cs.monotone_in_k
    assert all(b <= a + 1e-9 for a, b in zip(cs.k_totals, cs.k_totals[1:]))


def test_cluster_set_invariants():
    X = _blobs([(0, 0), (12, 3)], 12, 1.5, seed=8)
    cs = global_kmeans(X, GkmConfig(max_k=4, bound_td=0.0))
    assert cs.assignments.max() < cs.k
    assert total_distance(X, cs) == pytest.approx(cs.total_distance, rel=1e-9)
    for j, c in enumerate(cs.centroids):
        members = X[cs.assignments == j]
        assert c.member_count == len(members) >= 1
        assert (c.mean >= members.min(axis=0) - 1e-12).all()
        assert (c.mean <= members.max(axis=0) + 1e-12).all()


def test_global_kmeans_is_deterministic():
    X = _blobs([(0, 0), (8, 8), (0, 9)], 9, 1.2, seed=21)
    cfg = GkmConfig(max_k=4, bound_td=0.0)
    a, b = global_kmeans(X, cfg), global_kmeans(X, cfg, threads=4)
    assert np.array_equal(a.assignments, b.assignments)
    assert a.total_distance == b.total_distance
    for ca, cb in zip(a.centroids, b.centroids):
        assert np.array_equal(ca.mean, cb.mean)
        assert np.array_equal(ca.inv_cov, cb.inv_cov)


def test_candidate_stride_limits_trials():
    X = _line_blobs()[:20]
    cs = global_kmeans(X, GkmConfig(max_k=2, bound_td=0.0, candidate_stride=5))
    assert cs.k == 2
    assert len(cs.k_totals) == 2


def test_zero_dimensional_data():
    X = np.zeros((5, 0))
    cs = global_kmeans(X, GkmConfig())
    assert cs.k == 1 and cs.total_distance == 0.0


# --- independent numpy reference ---

def _np_centroid(rows, ridge):
    d = rows.shape[1]
    cov = np.atleast_2d(np.cov(rows, rowvar=False, ddof=1)) if len(rows) > 1 else np.zeros((d, d))
    lam = ridge * (np.trace(cov) / d + 1.0)
    return np.mean(rows, axis=0), np.linalg.inv(cov + lam * np.eye(d))


def _np_distances(cents, X):
    cols = []
    for mean, inv in cents:
        diff = X - mean
        q = np.einsum("ij,jk,ik->i", diff, inv, diff)
        cols.append(np.sqrt(np.maximum(q, 0.0)))
    return np.column_stack(cols)


def _np_refine(X, cents, ridge, max_iters):
    dists = _np_distances(cents, X)
    assign = np.argmin(dists, axis=1)
    for _ in range(max_iters):
        used = np.unique(assign)
        cents = [_np_centroid(X[assign == j], ridge) for j in used]
        assign = np.searchsorted(used, assign)
        dists = _np_distances(cents, X)
        new = np.argmin(dists, axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    return cents, float(dists[np.arange(len(X)), assign].sum())


def _np_incremental(X, ridge, max_k, max_iters):
    """Every point tried as the next seed at every k; the best sequence prefix is kept."""
    glob_mean, glob_inv = _np_centroid(X, ridge)
    cents, total = _np_refine(X, [(glob_mean, glob_inv)], ridge, max_iters)
    totals = [total]
    for _ in range(2, max_k + 1):
        trials = [_np_refine(X, cents + [(X[s].copy(), glob_inv)], ridge, max_iters) for s in range(len(X))]
        cents, total = min(trials, key=lambda t: t[1])
        totals.append(total)
    return totals


@pytest.mark.parametrize("centers,n,seed", [
    ([(0, 0), (9, 1), (2, 10)], 8, 5),
    ([(0, 0, 0), (6, 6, 0), (0, 6, 6)], 10, 17),
    ([(0, 0), (4, 4)], 14, 2),
])
def test_incremental_totals_match_numpy_reference(centers, n, seed):
    X = _blobs(centers, n, 1.0, seed=seed)
    cfg = GkmConfig(max_k=3, bound_td=0.0, ridge=1e-6, candidate_stride=1)
    cs = global_kmeans(X, cfg)
    reference = _np_incremental(X, cfg.ridge, cfg.max_k, cfg.max_iters)
    assert len(cs.k_totals) == 3
    assert list(cs.k_totals) == pytest.approx(reference, rel=1e-9, abs=1e-9)


def test_refine_total_is_minimal_over_every_two_way_split():
    X = _blobs([(0, 0), (20, 20)], 10, 1.0, seed=3)
    cs = kmeans_refine(X, [estimate_centroid(X[:1]), estimate_centroid(X[10:11])])
    assert cs.k == 2
    d = np.column_stack([scfd_stats.mahalanobis_rows(c, X) for c in cs.centroids])
    n = len(X)
    shifts = np.arange(n - 1, dtype=np.uint32)
    chunk = 1 << 15
    best = np.inf
    # point 0 fixed on one side: 2^19 unordered splits, both labelings each
    for start in range(0, 1 << (n - 1), chunk):
        masks = np.arange(start, start + chunk, dtype=np.uint32)
        side = np.hstack([np.zeros((chunk, 1), dtype=bool), ((masks[:, None] >> shifts) & 1).astype(bool)])
        a = np.where(side, d[:, 1], d[:, 0]).sum(axis=1)
        b = np.where(side, d[:, 0], d[:, 1]).sum(axis=1)
        best = min(best, float(a.min()), float(b.min()))
    assert cs.total_distance <= best + 1e-9
    assert cs.total_distance == pytest.approx(best, rel=1e-12)


# --- refine monotonicity flag ---

def test_refine_flags_monotone_history_without_ridge():
    X = _blobs([(0, 0), (20, 20)], 10, 1.0, seed=3)
    cs = kmeans_refine(X, [_identity(X[0]), _identity(X[10])], GkmConfig(ridge=0.0))
    assert cs.monotone_refine
    assert cs.assignments.tolist() == [0] * 10 + [1] * 10


def test_refine_flag_agrees_with_history():
    X = _blobs([(0, 0), (6, 2), (3, 8)], 10, 1.5, seed=4)
    cs = kmeans_refine(X, [_identity([0.0, 0.0]), _identity([6.0, 6.0])], GkmConfig(ridge=0.0))
    rising = any(b > a * (1 + 1e-12) for a, b in zip(cs.history, cs.history[1:]))
    assert cs.monotone_refine is not rising


def test_refine_flag_unchecked_with_ridge():
    X = _blobs([(0, 0), (6, 2), (3, 8)], 10, 1.5, seed=4)
    cs = kmeans_refine(X, [_identity([0.0, 0.0]), _identity([10.0, 10.0])], GkmConfig(ridge=1e-6))
    assert cs.monotone_refine


def test_global_kmeans_carries_refine_flag():
    X = _line_blobs()
    cs = global_kmeans(X, GkmConfig(max_k=3, bound_td=0.0))
    assert isinstance(cs.monotone_refine, bool)


def test_cluster_set_fields():
    assert [f.name for f in dataclasses.fields(ClusterSet)] == [
        "centroids", "assignments", "total_distance", "converged", "iterations",
        "history", "k_totals", "stop_reason", "monotone_in_k", "monotone_refine",
    ]
