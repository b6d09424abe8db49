import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsentry import clustering
from qsentry.clustering import ClusterResult, identify_minority, kmeans, relative_cluster_size, select_k, silhouette
from qsentry.errors import DomainError, RankError, ShapeError
from tests import oracles

FOUR = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])


def kmeans_instance(seed):
    """A random N <= 8 point cloud and K in {2, 3}; half the clouds are clumped, half uniform."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 4))
    n = int(rng.integers(K, 9))
    if seed % 2:
        X = rng.normal(size=(n, 2))
    else:
        centers = rng.normal(scale=4, size=(K, 2))
        X = centers[rng.integers(K, size=n)] + rng.normal(size=(n, 2))
    return X, K


def kmeans_matches_brute_force(seed):
    X, K = kmeans_instance(seed)
    want, _ = oracles.brute_force_kmeans(X, K)
    got = kmeans(X, K, seed=seed)
    return abs(got.wcss - want) <= 1e-9 * max(1.0, want), got.wcss, want


def silhouette_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 201))
    K = int(rng.integers(2, min(6, n) + 1))
    X = rng.normal(size=(n, int(rng.integers(1, 5))))
    labels = rng.integers(K, size=n)
    labels[:K] = np.arange(K)  # every cluster populated
    return X, labels


def ica_instance(seed, n=500):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-np.sqrt(3), np.sqrt(3), size=(n, 2))
    M = rng.normal(size=(2, 2))
    while abs(np.linalg.det(M)) < 0.2:
        M = rng.normal(size=(2, 2))
    return S, S @ M.T


def ica_recovery(seed):
    """Smallest |correlation| between a true source and its best-matched estimate."""
    S, A = ica_instance(seed)
    V = clustering.transform_features(A, "ica", d=2, seed=seed).values
    C = np.abs(np.corrcoef(S.T, V.T)[:2, 2:])
    return max(min(C[0, 0], C[1, 1]), min(C[0, 1], C[1, 0]))


# -- k-means ----------------------------------------------------------------


def test_four_point_example():
    res = kmeans(FOUR, 2, seed=0)
    groups = {tuple(np.flatnonzero(res.assignments == k)) for k in range(2)}
    assert groups == {(0, 1), (2, 3)}
    cents = sorted(map(tuple, res.centroids))
    np.testing.assert_allclose(cents, [(0, 0.5), (10, 10.5)])
    want, _ = oracles.brute_force_kmeans(FOUR, 2)
    assert res.wcss == pytest.approx(want)


def test_single_cluster():
    X = np.random.default_rng(0).normal(size=(30, 3))
    res = kmeans(X, 1)
    np.testing.assert_allclose(res.centroids[0], X.mean(axis=0))
    assert res.wcss == pytest.approx(X.var(axis=0).sum() * 30)


def test_identical_points_repaired():
    res = kmeans(np.ones((6, 2)), 2)
    assert res.wcss == 0.0
    assert set(res.sizes) == {5, 1} or min(res.sizes) >= 1


def test_kmeans_errors():
    with pytest.raises(DomainError):
        kmeans(np.zeros((2, 2)), 3)
    with pytest.raises(DomainError):
        kmeans(np.zeros((2, 2)), 0)


@pytest.mark.parametrize("seed", range(60))
def test_kmeans_matches_brute_force(seed):
    ok, got, want = kmeans_matches_brute_force(seed)
    assert ok, (got, want)


def test_lloyd_wcss_non_increasing():
    X = np.random.default_rng(5).normal(size=(200, 2))
    rng = np.random.default_rng(1)
    _, _, trace = clustering.lloyd(X, clustering.kmeans_plusplus(X, 4, rng))
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_kmeans_deterministic():
    X = np.random.default_rng(2).normal(size=(100, 2))
    a, b = kmeans(X, 3, seed=4), kmeans(X, 3, seed=4)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.wcss == b.wcss


# -- silhouette -------------------------------------------------------------


def test_silhouette_four_points():
    s, _ = silhouette(FOUR, np.array([0, 0, 1, 1]))
    b = (np.hypot(10, 10) + np.hypot(10, 11)) / 2
    # exact value is 14.50410; the published hand figure rounds it to 14.5039
    assert b == pytest.approx(14.5041, abs=1e-4)
    assert s[0] == pytest.approx((b - 1) / b)
    assert s[0] == pytest.approx(0.9311, abs=1e-4)


def test_equidistant_point_scores_zero():
    # point 1 is 2 from its partner and 2 from the other cluster
    X = np.array([[0.0], [2.0], [4.0]])
    s, _ = silhouette(X, np.array([0, 0, 1]))
    assert s[1] == pytest.approx(0.0)


def test_singleton_scores_zero_and_k1_error():
    s, _ = silhouette(FOUR, np.array([0, 0, 0, 1]))
    assert s[3] == 0.0
    with pytest.raises(DomainError, match="K=1"):
        silhouette(FOUR, np.zeros(4, int))


@pytest.mark.parametrize("seed", range(25))
def test_silhouette_matches_reference(seed):
    X, labels = silhouette_instance(seed)
    s, sc = silhouette(X, labels)
    ref = oracles.silhouette_reference(X, labels)
    np.testing.assert_allclose(s, ref, atol=1e-10, rtol=0)
    assert sc == pytest.approx(ref.mean(), abs=1e-10)
    assert s.min() >= -1 and s.max() <= 1


# -- K selection and minority -------------------------------------------------


def blobs(k, seed, n=60):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [20, 0], [0, 20]])[:k]
    return np.concatenate([c + rng.normal(size=(n, 2)) for c in centers])


@pytest.mark.parametrize("k", [2, 3])
def test_select_k_on_blobs(k):
    best, scores, _ = select_k(blobs(k, k), (2, 3), seed=0)
    assert best == k
    assert set(scores) == {2, 3}


def test_select_k_tie_goes_small():
    # four corners of a square: K=2 splits into halves, K=3 cannot beat it
    X = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    X = np.concatenate([X, X])
    best, scores, _ = select_k(X, (2, 2), seed=0)
    assert best == 2
    with pytest.raises(DomainError):
        select_k(X[:2], (2, 3))


def result_with_sizes(sizes, points=None):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    return ClusterResult(labels, np.zeros((len(sizes), 1)), 0.0, len(sizes), points)


def test_minority_examples():
    assert identify_minority(result_with_sizes([950, 50])) == 1
    assert identify_minority(result_with_sizes([495, 498, 7])) == 2
    pts = np.concatenate([np.zeros((3, 1)), np.full((3, 1), 5.0), np.full((3, 1), 1.0)])
    # equal sizes: cluster 1 sits farthest from the global mean (2.0)
    assert identify_minority(result_with_sizes([3, 3, 3], pts)) == 1
    with pytest.raises(DomainError):
        identify_minority(result_with_sizes([10]))


def test_rcs_examples():
    assert relative_cluster_size(result_with_sizes([950, 50])) == 0.05
    assert relative_cluster_size(result_with_sizes([947, 53])) == 0.053
    assert relative_cluster_size(result_with_sizes([500, 500])) == 0.5


# -- feature transforms -------------------------------------------------------


def test_pca_line_preserves_distances():
    t = np.random.default_rng(0).normal(size=40)
    A = np.stack([3 * t + 1, -2 * t + 5], axis=1)
    V = clustering.transform_features(A, "pca", d=1).values[:, 0]
    D_in = np.abs(t[:, None] - t[None, :]) * np.hypot(3, 2)
    np.testing.assert_allclose(np.abs(V[:, None] - V[None, :]), D_in, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_ica_recovers_mixed_sources(seed):
    assert ica_recovery(seed) >= 0.95


def test_ica_deterministic_and_apply():
    _, A = ica_instance(0)
    a = clustering.transform_features(A, "ica", 2, seed=3)
    b = clustering.transform_features(A, "ica", 2, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_allclose(a.apply(A), a.values, atol=1e-12)


def test_constant_columns_dropped():
    rng = np.random.default_rng(1)
    A = np.concatenate([rng.normal(size=(50, 3)), np.ones((50, 1))], axis=1)
    fm = clustering.transform_features(A, "pca", d=2)
    assert fm.kept_columns.tolist() == [0, 1, 2]


def test_transform_errors():
    with pytest.raises(RankError):
        clustering.transform_features(np.ones((20, 3)), "ica", 2)
    with pytest.raises(RankError):
        # rank-1 data cannot give two whitened directions
        t = np.arange(20.0)
        clustering.transform_features(np.stack([t, 2 * t], axis=1), "ica", 2)
    with pytest.raises(ShapeError):
        clustering.transform_features(np.random.default_rng(0).normal(size=(2, 3)), "ica", 2)
    with pytest.raises(ShapeError):
        clustering.transform_features(np.zeros((10, 2)), "ica", 3)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_transform_output_finite(seed):
    A = np.random.default_rng(seed).uniform(-1, 1, size=(60, 8))
    for kind in ("ica", "pca"):
        V = clustering.transform_features(A, kind, 2, seed=seed).values
        assert V.shape == (60, 2) and np.all(np.isfinite(V))
