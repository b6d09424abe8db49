"""Feature transforms and clustering used by the detector.

Everything here is plain numpy: symmetric FastICA, PCA, k-means with
k-means++ seeding, and the silhouette coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, RankError, ShapeError

TRANSFORMS = ("ica", "pca", "identity")
RANK_TOL = 1e-10


@dataclass
class FeatureMatrix:
    values: np.ndarray
    transform_kind: str
    projection: np.ndarray
    mean: np.ndarray
    kept_columns: np.ndarray
    iterations: int = 0

    def apply(self, A: np.ndarray) -> np.ndarray:
        """Project new rows with the fitted transform."""
        A = np.asarray(A, dtype=np.float64)
        return (A[:, self.kept_columns] - self.mean) @ self.projection


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    wcss: float
    K: int
    points: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.K)


# ---------------------------------------------------------------------------
# transforms


def _whitening(X: np.ndarray, d: int):
    """Eigendecomposition of the covariance; returns (eigenvalues, eigenvectors) sorted descending."""
    cov = X.T @ X / X.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    # deterministic eigenvector signs: largest-magnitude entry positive
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    vecs = vecs * np.where(flip == 0, 1.0, flip)
    rank = int(np.sum(vals > RANK_TOL * max(vals[0], RANK_TOL)))
    if rank < d:
        raise RankError(f"covariance has rank {rank}, below the requested dimension d={d}")
    return vals, vecs, rank


def _sym_decorrelate(W: np.ndarray) -> np.ndarray:
    """W <- (W W^T)^(-1/2) W."""
    s, u = np.linalg.eigh(W @ W.T)
    s = np.maximum(s, np.finfo(float).tiny)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def fastica(Z: np.ndarray, n_components: int, seed: int, tol: float = 1e-6, max_iter: int = 500):
    """Symmetric FastICA with the tanh (log-cosh) contrast on whitened rows ``Z``.

    Returns (W, iterations) where the sources are ``Z @ W.T``.
    """
    n, m = Z.shape
    rng = np.random.default_rng(seed)
    W = _sym_decorrelate(rng.standard_normal((n_components, m)))
    it = 0
    for it in range(1, max_iter + 1):
        proj = Z @ W.T
        g = np.tanh(proj)
        g_prime = 1.0 - g ** 2
        W_new = _sym_decorrelate(g.T @ Z / n - g_prime.mean(axis=0)[:, None] * W)
        rotation = np.max(np.abs(np.abs(np.einsum("ij,ij->i", W_new, W)) - 1.0))
        W = W_new
        if rotation < tol:
            break
    return W, it


SELECTIONS = ("negentropy", "kurtosis")


def negentropy(s: np.ndarray) -> np.ndarray:
    """Log-cosh negentropy approximation per column of unit-variance data."""
    gauss = 0.3745672075  # E[log cosh(nu)] for nu ~ N(0, 1)
    return (np.log(np.cosh(s)).mean(axis=0) - gauss) ** 2


def excess_kurtosis(s: np.ndarray) -> np.ndarray:
    """Per-column excess kurtosis; large for a small group far from the bulk."""
    c = s - s.mean(axis=0)
    var = (c * c).mean(axis=0)
    return (c ** 4).mean(axis=0) / (var * var) - 3.0


def transform_features(A, kind: str = "ica", d: int = 2, seed: int = 0, select: str = "negentropy") -> FeatureMatrix:
    """Reduce an N x Q matrix to N x d features.

    Constant columns are dropped first.  The ICA path whitens all remaining
    directions, unmixes them with symmetric FastICA, and keeps the ``d``
    components ranked by ``select``: ``"negentropy"`` (most non-Gaussian) or
    ``"kurtosis"`` (heaviest tails), or ``"pca"`` (whiten onto the top-d
    principal directions before unmixing).
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {A.shape}")
    if kind not in TRANSFORMS:
        raise DomainError(f"unknown transform {kind!r}")
    n, q = A.shape
    if kind == "identity":
        return FeatureMatrix(A.copy(), kind, np.eye(q), np.zeros(q), np.arange(q))
    if not 1 <= d <= q:
        raise ShapeError(f"d must be in [1, {q}], got {d}")
    if n <= d:
        raise ShapeError(f"need more samples than dimensions: N={n}, d={d}")
    spread = A.max(axis=0) - A.min(axis=0)
    kept = np.flatnonzero(spread > 0)
    if kept.size < d:
        raise RankError(f"only {kept.size} non-constant columns, below the requested dimension d={d}")
    mean = A[:, kept].mean(axis=0)
    X = A[:, kept] - mean
    vals, vecs, rank = _whitening(X, d)

    if kind == "pca":
        proj = vecs[:, :d]
        return FeatureMatrix(X @ proj, kind, proj, mean, kept)

    if select == "pca":
        width = d
    elif select in SELECTIONS:
        width = rank
    else:
        raise DomainError(f"unknown component selection {select!r}")
    whiten = vecs[:, :width] / np.sqrt(vals[:width])
    Z = X @ whiten
    W, iterations = fastica(Z, width, seed)
    sources = Z @ W.T
    if width > d:
        score = negentropy(sources) if select == "negentropy" else excess_kurtosis(sources)
        order = np.argsort(-score, kind="stable")[:d]
        W = W[order]
    proj = whiten @ W.T
    return FeatureMatrix(X @ proj, kind, proj, mean, kept, iterations)


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _wcss(X: np.ndarray, labels: np.ndarray, K: int):
    centroids = np.zeros((K, X.shape[1]))
    total = 0.0
    for k in range(K):
        members = X[labels == k]
        if len(members):
            centroids[k] = members.mean(axis=0)
            total += float(((members - centroids[k]) ** 2).sum())
    return centroids, total


def _repair_empty(X: np.ndarray, labels: np.ndarray, dists: np.ndarray, K: int) -> np.ndarray:
    """Give each empty cluster the point farthest from its own centroid."""
    labels = labels.copy()
    for k in range(K):
        counts = np.bincount(labels, minlength=K)
        if counts[k]:
            continue
        own = dists[np.arange(len(labels)), labels]
        movable = counts[labels] > 1
        own = np.where(movable, own, -np.inf)
        labels[int(np.argmax(own))] = k
    return labels


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 300):
    """Lloyd iterations from given centroids; returns (labels, centroids, wcss trace)."""
    K = centroids.shape[0]
    labels = None
    trace = []
    for _ in range(max_iter):
        dists = _sq_dists(X, centroids)
        new = np.argmin(dists, axis=1)
        new = _repair_empty(X, new, dists, K)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids, w = _wcss(X, labels, K)
        trace.append(w)
    return labels, centroids, trace


def hartigan(X: np.ndarray, labels: np.ndarray, K: int, max_sweeps: int = 100):
    """Single-point transfers that lower WCSS once the centroid shift is counted.

    A point x in cluster a moves to cluster b when
    n_b/(n_b+1) |x - c_b|^2 < n_a/(n_a-1) |x - c_a|^2.  A partition stable
    under these moves is also stable under Lloyd reassignment.
    """
    labels = labels.copy()
    centroids, _ = _wcss(X, labels, K)
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    for _ in range(max_sweeps):
        moved = False
        for i in range(X.shape[0]):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((centroids - X[i]) ** 2).sum(axis=1)
            gain = counts / (counts + 1.0) * d
            gain[a] = counts[a] / (counts[a] - 1.0) * d[a]
            b = int(np.argmin(gain))
            if b == a or gain[b] >= gain[a] - 1e-12 * max(1.0, gain[a]):
                continue
            centroids[a] = (centroids[a] * counts[a] - X[i]) / (counts[a] - 1.0)
            centroids[b] = (centroids[b] * counts[b] + X[i]) / (counts[b] + 1.0)
            counts[a] -= 1.0
            counts[b] += 1.0
            labels[i] = b
            moved = True
        if not moved:
            break
    return labels


def kmeans(V, K: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> ClusterResult:
    """Best of ``restarts`` k-means++ seeded runs by WCSS, ties to the earliest restart.

    Each restart runs Lloyd iterations to a fixed point and then polishes
    the partition with Hartigan transfers.
    """
    X = np.asarray(getattr(V, "values", V), dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {X.shape}")
    n = X.shape[0]
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    if K > n:
        raise DomainError(f"K={K} exceeds the number of points N={n}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        labels, centroids, trace = lloyd(X, kmeans_plusplus(X, K, rng), max_iter)
        labels = hartigan(X, labels, K)
        centroids, w = _wcss(X, labels, K)
        if best is None or w < best[2]:
            best = (labels, centroids, w)
    labels, centroids, w = best
    return ClusterResult(labels.astype(np.int64), centroids, w, K, X)


# ---------------------------------------------------------------------------
# silhouette


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    return np.sqrt(_sq_dists(X, X))


def silhouette(V, assignments) -> tuple[np.ndarray, float]:
    """Per-sample silhouette values and their mean, Euclidean distances.

    Members of singleton clusters score 0.
    """
    X = np.asarray(getattr(V, "values", V), dtype=np.float64)
    labels = np.asarray(assignments)
    if labels.shape != (X.shape[0],):
        raise ShapeError(f"{labels.shape[0]} assignments for {X.shape[0]} points")
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise DomainError("silhouette undefined for K=1")
    D = pairwise_distances(X)
    np.fill_diagonal(D, 0.0)
    onehot = (labels[:, None] == clusters[None, :]).astype(np.float64)
    sums = D @ onehot
    counts = onehot.sum(axis=0)
    own = np.searchsorted(clusters, labels)
    own_count = counts[own]
    rows = np.arange(X.shape[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        a = sums[rows, own] / (own_count - 1)
        means = sums / counts[None, :]
    means[rows, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    s = np.where(own_count > 1, s, 0.0)
    return s, float(s.mean())


def cluster_silhouettes(scores: np.ndarray, assignments: np.ndarray, K: int) -> list:
    return [float(scores[assignments == k].mean()) if np.any(assignments == k) else float("nan") for k in range(K)]


def select_k(V, candidates: Sequence[int] = (2, 3), seed: int = 0, restarts: int = 10, max_iter: int = 300):
    """K with the highest mean silhouette; ties go to the smaller K.

    Returns (K, {K: score}, {K: ClusterResult}).
    """
    X = np.asarray(getattr(V, "values", V), dtype=np.float64)
    if max(candidates) > X.shape[0]:
        raise DomainError(f"largest candidate K={max(candidates)} exceeds N={X.shape[0]}")
    scores, results = {}, {}
    for K in sorted(set(candidates)):
        res = kmeans(X, K, seed, restarts, max_iter)
        results[K] = res
        scores[K] = silhouette(X, res.assignments)[1] if K >= 2 else float("-inf")
    best = max(sorted(scores), key=lambda k: (scores[k], -k))
    return best, scores, results


def identify_minority(result: ClusterResult) -> int:
    """Index of the smallest cluster; ties go to the one farther from the global centroid."""
    if result.K < 2:
        raise DomainError("minority cluster undefined for K=1")
    sizes = result.sizes
    smallest = np.flatnonzero(sizes == sizes.min())
    if smallest.size == 1 or result.points is None:
        return int(smallest[0])
    center = result.points.mean(axis=0)
    spread = [
        np.linalg.norm(result.points[result.assignments == k] - center, axis=1).mean() for k in smallest
    ]
    return int(smallest[int(np.argmax(spread))])


def relative_cluster_size(result: ClusterResult) -> float:
    sizes = result.sizes
    return float(sizes[identify_minority(result)] / sizes.sum())
