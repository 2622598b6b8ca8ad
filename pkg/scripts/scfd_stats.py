"""
Statistical core for SCFD profiles
Zero-variance dimension reduction, regularized centroid estimation,
Mahalanobis distance and the erf-derived cutoff distance.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

try:
    import config
    import errors
except ImportError:
    # Fallback if running from root
    from scripts import config
    from scripts import errors

logger = logging.getLogger(__name__)

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
_SERIES_LIMIT = 2.5


@dataclass(frozen=True, eq=False)
class DimReduction:
    kept: tuple
    merged: tuple
    residual_expected: int
    dim: int

    @property
    def reduced_dim(self):
        return len(self.kept)

    def __eq__(self, other):
        return (isinstance(other, DimReduction) and self.kept == other.kept
                and self.merged == other.merged
                and self.residual_expected == other.residual_expected
                and self.dim == other.dim)


@dataclass(frozen=True, eq=False)
class ClusterCentroid:
    mean: np.ndarray
    inv_cov: np.ndarray
    member_count: int
    stdev: Optional[np.ndarray] = None
    ridge_lambda: float = 0.0

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class Cutoff:
    p0: float
    theta: float


class OpCounter:
    """Counts multiply-adds spent in distance evaluations."""

    def __init__(self):
        self.madds = 0

    def add(self, n):
        self.madds += n


# ---------------------------------------------------------------------------
# Dimension reduction
# ---------------------------------------------------------------------------

def fit_reduction(X) -> DimReduction:
    matrix = np.asarray(getattr(X, "matrix", X), dtype=np.int64)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise errors.EmptyInput("reduction needs at least one row")
    # Integer counts: zero variance <=> every row equals the first
    constant = (matrix == matrix[0]).all(axis=0)
    kept = tuple(int(i) for i in np.flatnonzero(~constant))
    merged = tuple(int(i) for i in np.flatnonzero(constant))
    residual = int(matrix[0, list(merged)].sum()) if merged else 0
    logger.info(f"Reduction: D={matrix.shape[1]} -> D'={len(kept)}, residual={residual}")
    return DimReduction(kept, merged, residual, matrix.shape[1])


def apply_reduction(r: DimReduction, x):
    counts = np.asarray(getattr(x, "counts", x))
    if counts.shape != (r.dim,):
        raise errors.DimensionMismatch(r.dim, counts.shape[0] if counts.ndim else 0)
    reduced = counts[list(r.kept)].astype(np.float64) if r.kept else np.zeros(0)
    residual = int(counts[list(r.merged)].sum()) if r.merged else 0
    return reduced, residual


def reduce_matrix(r: DimReduction, matrix):
    """Row-wise apply_reduction. Returns (float N x D', int residual per row)."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] != r.dim:
        raise errors.DimensionMismatch(r.dim, matrix.shape[-1])
    reduced = matrix[:, list(r.kept)].astype(np.float64)
    residual = matrix[:, list(r.merged)].sum(axis=1).astype(np.int64)
    return reduced, residual


# ---------------------------------------------------------------------------
# Centroids and distance
# ---------------------------------------------------------------------------

def estimate_centroid(rows, ridge: float = config.RIDGE) -> ClusterCentroid:
    """
    Mean and pre-inverted regularized sample covariance of `rows`.
    The stored matrix is inv(cov + lam*I) with lam = ridge * (trace(cov)/D' + 1).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n, dim = rows.shape
    if n < 1:
        raise errors.EmptyInput("centroid needs at least one row")
    if ridge < 0:
        raise errors.OutOfRange(f"ridge must be >= 0, got {ridge}")
    mean = rows.mean(axis=0)
    if dim == 0:
        return ClusterCentroid(mean, np.zeros((0, 0)), n, np.zeros(0), 0.0)

    centered = rows - mean
    cov = centered.T @ centered / max(n - 1, 1)
    lam = ridge * (np.trace(cov) / dim + 1.0)
    try:
        factor = linalg.cho_factor(cov + lam * np.eye(dim), lower=True)
        inv_cov = linalg.cho_solve(factor, np.eye(dim))
    except linalg.LinAlgError as e:
        raise errors.SingularCovariance(f"covariance not positive definite (lambda={lam:g}): {e}") from None
    inv_cov = (inv_cov + inv_cov.T) / 2.0
    return ClusterCentroid(mean, inv_cov, n, np.sqrt(np.diag(cov)), float(lam))


def mahalanobis(c: ClusterCentroid, x, counter: Optional[OpCounter] = None) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != c.mean.shape:
        raise errors.DimensionMismatch(c.dim, x.shape[0] if x.ndim else 0)
    d = c.dim
    if counter is not None:
        counter.add(d * d + d)
    if d == 0:
        return 0.0
    diff = x - c.mean
    q = float(diff @ c.inv_cov @ diff)
    return math.sqrt(q) if q > 0.0 else 0.0


def mahalanobis_rows(c: ClusterCentroid, X) -> np.ndarray:
    """Vectorized distances from every row of X to c."""
    X = np.asarray(X, dtype=np.float64)
    if c.dim == 0:
        return np.zeros(X.shape[0])
    diff = X - c.mean
    q = np.einsum('ij,jk,ik->i', diff, c.inv_cov, diff)
    return np.sqrt(np.clip(q, 0.0, None))


def contributions(c: ClusterCentroid, x) -> np.ndarray:
    """Per-coordinate terms of the quadratic form; they sum to dist**2."""
    diff = np.asarray(x, dtype=np.float64) - c.mean
    return diff * (c.inv_cov @ diff)


# ---------------------------------------------------------------------------
# Error function and cutoff
# ---------------------------------------------------------------------------

def _erf_series(x):
    # erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n (2x^2)^n x / (1*3*...*(2n+1)); all terms positive
    term = x
    total = x
    two_x2 = 2.0 * x * x
    n = 0
    while abs(term) > 1e-17 * abs(total):
        n += 1
        term *= two_x2 / (2 * n + 1)
        total += term
    return _TWO_OVER_SQRT_PI * math.exp(-x * x) * total


def _erfc_continued_fraction(x):
    # erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))), modified Lentz
    tiny = 1e-300
    f = x
    c = x
    d = 0.0
    for n in range(1, 500):
        a = n / 2.0
        d = x + a * d
        d = tiny if d == 0.0 else d
        c = x + a / c
        c = tiny if c == 0.0 else c
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x * x) / math.sqrt(math.pi) / f


def erf(x: float) -> float:
    if x < 0:
        return -erf(-x)
    if x < _SERIES_LIMIT:
        return _erf_series(x)
    return 1.0 - _erfc_continued_fraction(x)


def erfc(x: float) -> float:
    if x < 0:
        return 2.0 - erfc(-x)
    if x < _SERIES_LIMIT:
        return 1.0 - _erf_series(x)
    return _erfc_continued_fraction(x)


def _upper_normal_quantile(p):
    # Three-term rational approximation of the normal upper-tail quantile, |err| < 4.5e-4
    t = math.sqrt(-2.0 * math.log(p))
    num = 2.515517 + 0.802853 * t + 0.010328 * t * t
    den = 1.0 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t ** 3
    return t - num / den


def erfcinv(q: float) -> float:
    """Inverse of erfc on (0, 1]: Newton-refined rational start."""
    if not 0.0 < q <= 1.0:
        raise errors.OutOfRange(f"erfcinv argument must be in (0, 1], got {q}")
    if q == 1.0:
        return 0.0
    # erfc(x) = 2 * Q(x * sqrt(2))
    x = max(_upper_normal_quantile(q / 2.0) / math.sqrt(2.0), 0.0)
    for _ in range(60):
        step = (erfc(x) - q) / (-_TWO_OVER_SQRT_PI * math.exp(-x * x))
        x -= step
        if abs(step) <= 1e-15 * max(1.0, abs(x)):
            break
    return x


def erfinv(y: float) -> float:
    if not -1.0 < y < 1.0:
        raise errors.OutOfRange(f"erfinv argument must be in (-1, 1), got {y}")
    if y < 0:
        return -erfinv(-y)
    return erfcinv(1.0 - y)


def compute_cutoff(p0: float) -> Cutoff:
    if not 0.0 < p0 <= 1.0:
        raise errors.OutOfRange(f"p0 must be in (0, 1], got {p0}")
    # Solve erfc directly so small p0 keeps its precision
    theta = erfcinv(p0) / config.MAHALANOBIS_SCALE
    return Cutoff(float(p0), theta)
