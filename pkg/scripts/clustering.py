"""
Mahalanobis k-means and the incremental global k-means driver.

Every new cluster at step k is seeded from each candidate data point in turn
(initial covariance = global covariance of X), refined with k-means, and the
trial with the smallest total distance is kept. Deterministic throughout.
"""

import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

try:
    import config
    import scfd_stats
    import workers
except ImportError:
    # Fallback if running from root
    from scripts import config
    from scripts import scfd_stats
    from scripts import workers

logger = logging.getLogger(__name__)


class GkmConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_k: int = Field(default=config.MAX_K, ge=1)
    bound_td: float = Field(default=config.BOUND_TD, ge=0)
    ridge: float = Field(default=config.RIDGE, ge=0)
    max_iters: int = Field(default=config.MAX_ITERS, ge=1)
    candidate_stride: int = Field(default=config.CANDIDATE_STRIDE, ge=1)


@dataclass(frozen=True, eq=False)
class ClusterSet:
    centroids: tuple
    assignments: np.ndarray
    total_distance: float
    converged: bool = True
    iterations: int = 0
    history: tuple = ()  # total distance after each refine iteration
    k_totals: tuple = ()  # best total per k (global_kmeans only)
    stop_reason: str = ""
    monotone_in_k: bool = True
    monotone_refine: bool = True  # history never rose (checked only when ridge == 0)

    @property
    def k(self):
        return len(self.centroids)


def assign_closest(centroids, x, counter=None):
    """(index, distance) of the nearest centroid; ties go to the lowest index."""
    best_i, best_d = 0, None
    for i, c in enumerate(centroids):
        d = scfd_stats.mahalanobis(c, x, counter)
        if best_d is None or d < best_d:
            best_i, best_d = i, d
    return best_i, best_d


def _assign_all(centroids, X):
    dists = np.column_stack([scfd_stats.mahalanobis_rows(c, X) for c in centroids])
    # argmin returns the first minimum: lowest index wins ties
    idx = np.argmin(dists, axis=1)
    return idx, dists[np.arange(X.shape[0]), idx]


def _reestimate(X, assignments, ridge):
    """Centroids from current members; empty clusters are dropped and indices compacted."""
    used = np.unique(assignments)
    remap = np.full(int(assignments.max()) + 1, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    centroids = [scfd_stats.estimate_centroid(X[assignments == j], ridge) for j in used]
    return centroids, remap[assignments]


def _distances_for(centroids, X, assignments):
    out = np.empty(X.shape[0])
    for j, c in enumerate(centroids):
        mask = assignments == j
        if mask.any():
            out[mask] = scfd_stats.mahalanobis_rows(c, X[mask])
    return out


def kmeans_refine(X, initial_centroids, cfg: GkmConfig = GkmConfig()) -> ClusterSet:
    X = np.asarray(X, dtype=np.float64)
    if not initial_centroids:
        raise ValueError("kmeans_refine needs at least one initial centroid")

    assignments, distances = _assign_all(initial_centroids, X)
    history = []
    monotone = True
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        centroids, assignments = _reestimate(X, assignments, cfg.ridge)
        new_assignments, new_distances = _assign_all(centroids, X)
        total = float(new_distances.sum())
        if cfg.ridge == 0 and history and total > history[-1] * (1 + 1e-12):
            monotone = False
            logger.warning(f"Total distance rose {history[-1]:.6f} -> {total:.6f} at iteration {iterations}")
        history.append(total)
        if np.array_equal(new_assignments, assignments):
            converged = True
            distances = new_distances
            break
        assignments = new_assignments
    else:
        centroids, assignments = _reestimate(X, assignments, cfg.ridge)
        distances = _distances_for(centroids, X, assignments)
        logger.warning(f"k-means did not converge in {cfg.max_iters} iterations (k={len(centroids)})")

    return ClusterSet(
        centroids=tuple(centroids),
        assignments=assignments,
        total_distance=float(distances.sum()),
        converged=converged,
        iterations=iterations,
        history=tuple(history),
        monotone_refine=monotone,
    )


def total_distance(X, cs: ClusterSet) -> float:
    X = np.asarray(X, dtype=np.float64)
    return float(sum(
        scfd_stats.mahalanobis(cs.centroids[a], row) for a, row in zip(cs.assignments, X)
    ))


def _candidate_seeds(X, stride):
    """Candidate indices stepping by stride; duplicate rows keep their first index."""
    seen = set()
    seeds = []
    for i in range(0, X.shape[0], stride):
        key = X[i].tobytes()
        if key not in seen:
            seen.add(key)
            seeds.append(i)
    return seeds


def global_kmeans(X, cfg: GkmConfig = GkmConfig(), threads: int = 1) -> ClusterSet:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 1:
        raise ValueError("global_kmeans needs at least one row")

    best = kmeans_refine(X, [scfd_stats.estimate_centroid(X, cfg.ridge)], cfg)
    k_totals = [best.total_distance]
    logger.info(f"k=1 total distance {best.total_distance:.3f}")
    global_centroid = scfd_stats.estimate_centroid(X, cfg.ridge)
    seeds = _candidate_seeds(X, cfg.candidate_stride)
    stop_reason = "bound" if best.total_distance <= cfg.bound_td else "max_k"

    k = 2
    while k <= cfg.max_k and best.total_distance > cfg.bound_td:
        base = list(best.centroids)

        def trial(seed, base=base):
            seed_centroid = scfd_stats.ClusterCentroid(
                X[seed].copy(), global_centroid.inv_cov, 1, global_centroid.stdev,
                global_centroid.ridge_lambda)
            return kmeans_refine(X, base + [seed_centroid], cfg)

        results = workers.run_parallel(trial, seeds, threads)
        # Lexicographic (total, seed index) minimum
        winner = min(range(len(seeds)), key=lambda i: (results[i].total_distance, seeds[i]))
        candidate = results[winner]
        if candidate.total_distance > best.total_distance:
            logger.warning(f"Total distance increased with k: {best.total_distance:.3f} -> "
                           f"{candidate.total_distance:.3f} at k={k}")
        best = candidate
        k_totals.append(best.total_distance)
        logger.info(f"k={k} total distance {best.total_distance:.3f} "
                    f"(seed {seeds[winner]}, {best.k} clusters, {len(seeds)} trials)")
        if best.total_distance <= cfg.bound_td:
            stop_reason = "bound"
        k += 1

    monotone = all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(k_totals, k_totals[1:]))
    logger.info(f"Global k-means stopped: k={best.k}, total={best.total_distance:.3f}, reason={stop_reason}")
    return ClusterSet(
        centroids=best.centroids,
        assignments=best.assignments,
        total_distance=best.total_distance,
        converged=best.converged,
        iterations=best.iterations,
        history=best.history,
        monotone_refine=best.monotone_refine,
        k_totals=tuple(k_totals),
        stop_reason=stop_reason,
        monotone_in_k=monotone,
    )
