"""Mini-batch k-means against an exact Lloyd's oracle and the partition
properties the descriptive generator relies on."""

import numpy as np
import pytest

from feedlab.clustering import inertia, minibatch_kmeans
from feedlab.errors import ConfigError


def lloyds(points, centers, iters=200):
    """Reference full-batch k-means used as the oracle."""
    centers = centers.copy()
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new = centers.copy()
        for c in range(centers.shape[0]):
            members = points[assign == c]
            if len(members):
                new[c] = members.mean(axis=0)
        if np.allclose(new, centers, atol=1e-12):
            break
        centers = new
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1), centers


def two_blobs(rng, n_per=60, sep=10.0):
    a = rng.normal(0.0, 0.5, size=(n_per, 2))
    b = rng.normal(sep, 0.5, size=(n_per, 2))
    return np.vstack([a, b]), np.array([0] * n_per + [1] * n_per)


class TestMinibatchKMeans:
    def test_two_blobs_match_blob_membership(self):
        rng = np.random.default_rng(42)
        points, truth = two_blobs(rng)
        assign, centers = minibatch_kmeans(points, k=2, batch_size=16, seed=7)
        # Cluster ids are arbitrary; compare partitions.
        flip = assign[0] != truth[0]
        mapped = 1 - assign if flip else assign
        np.testing.assert_array_equal(mapped, truth)

    def test_two_blobs_match_lloyds_partition(self):
        rng = np.random.default_rng(3)
        points, _ = two_blobs(rng, n_per=40, sep=8.0)
        assign, centers = minibatch_kmeans(points, k=2, batch_size=32, seed=5)
        oracle_assign, oracle_centers = lloyds(points, centers.copy())
        np.testing.assert_array_equal(assign, oracle_assign)
        np.testing.assert_allclose(
            np.sort(centers, axis=0), np.sort(oracle_centers, axis=0), atol=0.2
        )

    def test_k_equals_n_gives_zero_inertia(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(12, 3))
        assign, centers = minibatch_kmeans(points, k=12, batch_size=4, seed=1)
        assert inertia(points, assign, centers) == pytest.approx(0.0, abs=1e-20)
        assert len(set(assign.tolist())) == 12

    def test_k_one_centroid_is_global_mean(self):
        rng = np.random.default_rng(5)
        points = rng.normal(2.0, 1.0, size=(200, 4))
        assign, centers = minibatch_kmeans(points, k=1, batch_size=50, seed=2)
        np.testing.assert_allclose(centers[0], points.mean(axis=0), atol=1e-8)
        assert set(assign.tolist()) == {0}

    def test_partition_property(self):
        rng = np.random.default_rng(9)
        points = rng.normal(size=(150, 2))
        assign, _ = minibatch_kmeans(points, k=10, batch_size=32, seed=3)
        counts = np.bincount(assign, minlength=10)
        assert counts.sum() == 150
        assert np.all(assign >= 0) and np.all(assign < 10)

    def test_no_empty_clusters_on_distinct_points(self):
        for seed in range(4):
            rng = np.random.default_rng(seed + 100)
            points = rng.normal(size=(60, 2))
            assign, _ = minibatch_kmeans(points, k=12, batch_size=16, seed=seed)
            assert len(set(assign.tolist())) == 12

    def test_seed_reproducibility(self):
        rng = np.random.default_rng(8)
        points = rng.normal(size=(80, 3))
        a1, c1 = minibatch_kmeans(points, k=5, batch_size=20, seed=11)
        a2, c2 = minibatch_kmeans(points, k=5, batch_size=20, seed=11)
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(c1, c2)

    def test_k_larger_than_n_rejected(self):
        with pytest.raises(ConfigError):
            minibatch_kmeans(np.zeros((3, 2)), k=4)

    def test_k_below_one_rejected(self):
        with pytest.raises(ConfigError):
            minibatch_kmeans(np.zeros((3, 2)), k=0)
