"""Mini-batch k-means with k-means++ seeding.

Centers update with a per-center learning rate of 1/count, which makes
each center the running mean of every point ever assigned to it. The
batched update below applies one mini-batch's worth of those per-point
steps in closed form: with prior count c and m new members summing to S,
the running-mean recurrence lands on (c * center + S) / (c + m).
"""

from __future__ import annotations

import numpy as np

from feedlab.errors import ConfigError


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # All remaining mass sits on already-chosen centers; fall back
            # to uniform choice so initialization still completes.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def _nearest(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # ||x - c||^2 expanded; argmin ties resolve to the lowest center index.
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    assign = np.argmin(d2, axis=1)
    return assign, d2


def minibatch_kmeans(
    points: np.ndarray,
    k: int,
    batch_size: int = 1000,
    seed: int = 0,
    tol: float = 1e-6,
    max_epochs: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster ``points`` into ``k`` groups.

    Returns (assignments, centroids). Epochs stream shuffled mini-batches;
    training stops once the largest centroid movement over an epoch falls
    below ``tol`` or after ``max_epochs``. The returned assignment is a
    final full-batch pass, and clusters left empty by it are re-seeded on
    the point farthest from its nearest center until every cluster owns at
    least one point (or no point is farther than zero, which only happens
    when distinct points run out).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError("points must be a 2-d array")
    n = points.shape[0]
    if k < 1:
        raise ConfigError("k must be at least 1")
    if k > n:
        raise ConfigError(f"k={k} exceeds the {n} available points")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    centers = _kmeanspp_init(points, k, rng)
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(max_epochs):
        prev = centers.copy()
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            batch = points[order[lo : lo + batch_size]]
            assign, _ = _nearest(batch, centers)
            m = np.bincount(assign, minlength=k)
            hit = m > 0
            sums = np.zeros_like(centers)
            np.add.at(sums, assign, batch)
            new_counts = counts + m
            centers[hit] = (
                counts[hit, None] * centers[hit] + sums[hit]
            ) / new_counts[hit, None]
            counts = new_counts
        # Re-seed centers that no point has ever reached.
        never = counts == 0
        if never.any():
            assign, d2 = _nearest(points, centers)
            nearest_d2 = d2[np.arange(n), assign]
            for ci in np.flatnonzero(never):
                far = int(np.argmax(nearest_d2))
                if nearest_d2[far] <= 0.0:
                    break
                centers[ci] = points[far]
                counts[ci] = 1
                nearest_d2[far] = 0.0
        movement = float(np.max(np.sqrt(np.sum((centers - prev) ** 2, axis=1))))
        if movement < tol:
            break
    assign, d2 = _nearest(points, centers)
    # Repair empty clusters by handing each the point currently farthest
    # from its assigned center. Points moved this way sit exactly on their
    # new center (distance zero), so they are never stolen again and the
    # loop terminates; clusters emptied by a steal rejoin the queue. Only
    # duplicate saturation (no point at positive distance left) can leave
    # a cluster empty.
    nearest_d2 = d2[np.arange(n), assign].copy()
    cluster_sizes = np.bincount(assign, minlength=k)
    pending = list(np.flatnonzero(cluster_sizes == 0))
    while pending:
        far = int(np.argmax(nearest_d2))
        if nearest_d2[far] <= 0.0:
            break
        ci = pending.pop(0)
        old = int(assign[far])
        assign[far] = ci
        centers[ci] = points[far]
        nearest_d2[far] = 0.0
        cluster_sizes[ci] += 1
        cluster_sizes[old] -= 1
        if cluster_sizes[old] == 0:
            pending.append(old)
    return assign, centers


def inertia(points: np.ndarray, assignments: np.ndarray, centers: np.ndarray) -> float:
    """Sum of squared distances from each point to its assigned center."""
    points = np.asarray(points, dtype=np.float64)
    diffs = points - centers[assignments]
    return float(np.sum(diffs**2))
