"""Per-client characteristic statistics.

A client summarizes the joint distribution of its private training data
as a vector mu: cross-covariance between features and the label,
concatenated principal-component loadings, or standardized moments.
Dummy recipes (zeros, or loadings pooled over every client) pad the
unconditional reference models to the same input width.

Shards passed to :func:`client_stats` only need three attributes:
``train_features`` (n x f matrix, no bias column), ``train_labels``
(length-n vector) and ``label_classes`` (class count, or None for a
real-valued label).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericError

__all__ = [
    "LocalStats",
    "CrossCovariance",
    "PrincipalComponents",
    "Moments",
    "DummyZeros",
    "DummyGlobalPC",
    "mean_vector",
    "covariance_matrix",
    "higher_moments",
    "cross_covariance",
    "jacobi_eigh",
    "principal_components",
    "one_hot",
    "client_stats",
]


@dataclass(frozen=True)
class CrossCovariance:
    """mu = cov(feature_j, label) per feature, with a trailing constant 1."""

    name = "cross_covariance"


@dataclass(frozen=True)
class PrincipalComponents:
    """mu = concatenated top-k loadings of [features | encoded label] rows."""

    components: int = 1
    name = "principal_components"


@dataclass(frozen=True)
class Moments:
    """mu = [per-feature mean | sample variance | skewness | kurtosis]."""

    name = "moments"


@dataclass(frozen=True)
class DummyZeros:
    """Zero vector matching the experiment's mu length (reference models)."""

    length: int
    name = "dummy_zeros"


@dataclass(frozen=True)
class DummyGlobalPC:
    """Precomputed loadings over the union of all clients' data."""

    mu: np.ndarray = field(repr=False)
    name = "dummy_global_pc"


@dataclass
class LocalStats:
    mu: np.ndarray
    descriptor: str


def mean_vector(X: np.ndarray) -> np.ndarray:
    """Per-column arithmetic mean."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("mean_vector needs a matrix with at least one row")
    return X.mean(axis=0)


def covariance_matrix(X: np.ndarray) -> np.ndarray:
    """Sample covariance (denominator n-1), symmetrized exactly."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("covariance_matrix needs at least 2 rows")
    d = X - X.mean(axis=0)
    c = (d.T @ d) / (X.shape[0] - 1)
    return 0.5 * (c + c.T)


def higher_moments(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardized per-column skewness and kurtosis.

    Zero-variance columns are reported as skew 0 / kurtosis 3 and flagged
    in the returned degenerate mask.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("higher_moments needs at least 2 rows")
    d = X - X.mean(axis=0)
    m2 = np.mean(d ** 2, axis=0)
    m3 = np.mean(d ** 3, axis=0)
    m4 = np.mean(d ** 4, axis=0)
    degenerate = m2 <= np.finfo(np.float64).tiny
    safe = np.where(degenerate, 1.0, m2)
    skew = np.where(degenerate, 0.0, m3 / safe ** 1.5)
    kurt = np.where(degenerate, 3.0, m4 / safe ** 2)
    return skew, kurt, degenerate


def cross_covariance(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample covariance between each column of X and y (denominator n-1)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"cross_covariance shape mismatch: {X.shape} vs {y.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError("cross_covariance needs at least 2 rows")
    return ((X - X.mean(axis=0)).T @ (y - y.mean())) / (n - 1)


def jacobi_eigh(S: np.ndarray, tol: float = 1e-12,
                max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm drops below ``tol`` or
    ``max_sweeps`` full sweeps have run.  Returns (eigenvalues, V) with
    eigenvalues descending and V's columns the matching eigenvectors.
    """
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise ValueError("jacobi_eigh needs a square matrix")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max(initial=1.0))):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    V = np.eye(n)
    off = _off_norm(A)
    for sweep in range(max_sweeps):
        if off <= tol:
            break
        # Threshold schedule: early sweeps skip small entries for speed,
        # later sweeps rotate everything and hard-zero entries that are
        # negligible next to their diagonal pair, which is what makes the
        # cyclic method terminate instead of churning on rounding noise.
        skip = 0.2 * off / (n * n) if sweep < 3 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                small = 100.0 * abs(apq)
                if sweep >= 3 and abs(A[p, p]) + small == abs(A[p, p]) \
                        and abs(A[q, q]) + small == abs(A[q, q]):
                    A[p, q] = A[q, p] = 0.0
                    continue
                if abs(apq) <= skip:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 \
                    else 1.0
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                _rotate(A, V, p, q, c, s)
        off = _off_norm(A)
    if off > max(tol, n * np.finfo(np.float64).eps * max(1.0, np.linalg.norm(A))):
        raise NumericError(f"jacobi_eigh did not converge: off-norm {off:.3e}")
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


def _off_norm(A: np.ndarray) -> float:
    # Summed directly over off-diagonal entries: the subtract-the-diagonal
    # shortcut cancels catastrophically and floors near ||A|| * sqrt(eps).
    B = A.copy()
    np.fill_diagonal(B, 0.0)
    return float(np.linalg.norm(B))


def _rotate(A, V, p, q, c, s):
    ap = A[:, p].copy()
    aq = A[:, q].copy()
    A[:, p] = c * ap - s * aq
    A[:, q] = s * ap + c * aq
    ap = A[p, :].copy()
    aq = A[q, :].copy()
    A[p, :] = c * ap - s * aq
    A[q, :] = s * ap + c * aq
    A[p, q] = 0.0
    A[q, p] = 0.0
    vp = V[:, p].copy()
    vq = V[:, q].copy()
    V[:, p] = c * vp - s * vq
    V[:, q] = s * vp + c * vq


def principal_components(D: np.ndarray, k: int,
                         center: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Top-k unit loadings of the sample covariance of D's rows.

    Loadings come back as a k x d matrix sorted by descending eigenvalue.
    Sign convention: the largest-magnitude entry of each loading is
    positive (ties broken by lowest index), making the result a
    deterministic function of the input.

    With center=False the eigendecomposition runs on the raw second-moment
    matrix D'D/(n-1) instead; constant columns then keep their mass, which
    client statistics rely on (a client holding a single label class must
    still light up that class's one-hot coordinate).
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] < 2:
        raise ValueError("principal_components needs at least 2 rows")
    d = D.shape[1]
    if not 1 <= k <= d:
        raise ValueError(f"component count {k} out of range 1..{d}")
    C = covariance_matrix(D) if center else (D.T @ D) / (D.shape[0] - 1)
    vals, vecs = jacobi_eigh(C)
    loadings = np.empty((k, d))
    for i in range(k):
        v = vecs[:, i]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        loadings[i] = v
    return loadings, vals[:k]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def client_stats(shard, recipe) -> LocalStats:
    """Compute one client's statistics vector from its training rows only.

    The operation receives a single shard and no federation handle, so
    cross-client access is impossible by construction; the global-PC dummy
    carries its precomputed vector inside the recipe.
    """
    if isinstance(recipe, DummyZeros):
        return LocalStats(np.zeros(recipe.length), recipe.name)
    if isinstance(recipe, DummyGlobalPC):
        return LocalStats(np.array(recipe.mu, dtype=np.float64), recipe.name)

    F = np.asarray(shard.train_features, dtype=np.float64)
    y = np.asarray(shard.train_labels, dtype=np.float64)
    if F.shape[0] < 2:
        raise ValueError("client_stats needs at least 2 training rows")

    if isinstance(recipe, CrossCovariance):
        mu = np.append(cross_covariance(F, y), 1.0)
        return LocalStats(mu, recipe.name)
    if isinstance(recipe, PrincipalComponents):
        classes = shard.label_classes
        tail = one_hot(y, classes) if classes is not None else y[:, None]
        loadings, _ = principal_components(np.hstack([F, tail]),
                                           recipe.components, center=False)
        return LocalStats(loadings.ravel(), recipe.name)
    if isinstance(recipe, Moments):
        var = F.var(axis=0, ddof=1)
        skew, kurt, _ = higher_moments(F)
        return LocalStats(np.concatenate([mean_vector(F), var, skew, kurt]), recipe.name)
    raise ValueError(f"unknown stats recipe: {recipe!r}")
