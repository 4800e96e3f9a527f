"""K-means clustering used for partition centroids and codebook training.

Lloyd iterations with kmeans++ seeding. Distance math runs in float64 so
the within-cluster sum of squares is reliably non-increasing, which the
tests assert. Empty clusters are repaired by moving them onto the point
currently farthest from its assigned centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Metric, as_f32c

_ROW_CHUNK = 8192


@dataclass
class KMeansConfig:
    n_clusters: int
    max_iters: int = 25
    tol: float = 1e-4
    seed: int = 0


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d) float32
    assignments: np.ndarray  # (n,) int64
    sse_history: list[float] = field(default_factory=list)
    n_iters: int = 0


def _nearest_l2(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per row: index of the closest centroid and that squared distance."""
    c64 = centroids.astype(np.float64)
    c_sq = (c64 * c64).sum(axis=1)
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for start in range(0, n, _ROW_CHUNK):
        chunk = x[start : start + _ROW_CHUNK].astype(np.float64)
        d2 = (chunk * chunk).sum(axis=1)[:, None] + c_sq[None, :] - 2.0 * (chunk @ c64.T)
        np.maximum(d2, 0.0, out=d2)
        lab = d2.argmin(axis=1)
        labels[start : start + chunk.shape[0]] = lab
        dists[start : start + chunk.shape[0]] = d2[np.arange(chunk.shape[0]), lab]
    return labels, dists


def seed_centroids_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """kmeans++ seeding: spread initial centroids by D^2 sampling."""
    n = x.shape[0]
    x64 = x.astype(np.float64)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    diff = x64 - x64[chosen[0]]
    best = (diff * diff).sum(axis=1)
    for i in range(1, k):
        total = best.sum()
        if total <= 0.0:
            # remaining points coincide with chosen centroids, pick any
            chosen[i] = rng.integers(n)
        else:
            chosen[i] = rng.choice(n, p=best / total)
        diff = x64 - x64[chosen[i]]
        np.minimum(best, (diff * diff).sum(axis=1), out=best)
    return as_f32c(x[chosen])


def _cluster_sums(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum of member rows and member count for each cluster."""
    order = np.argsort(labels, kind="stable")
    sorted_x = x[order].astype(np.float64)
    sorted_labels = labels[order]
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    present = np.flatnonzero(counts)
    if present.size:
        starts = np.searchsorted(sorted_labels, present)
        sums[present] = np.add.reduceat(sorted_x, starts, axis=0)
    return sums, counts


def kmeans(x: np.ndarray, config: KMeansConfig) -> KMeansResult:
    x = as_f32c(np.atleast_2d(x))
    k = config.n_clusters
    if k < 1:
        raise ValueError("n_clusters must be >= 1")
    if x.shape[0] < k:
        raise ValueError(f"need at least {k} points, got {x.shape[0]}")
    rng = np.random.default_rng(config.seed)
    centroids = seed_centroids_pp(x, k, rng)
    result = KMeansResult(centroids, np.zeros(x.shape[0], dtype=np.int64))
    prev_sse = np.inf
    for it in range(config.max_iters):
        labels, dists = _nearest_l2(x, centroids)
        sse = float(dists.sum())
        result.assignments = labels
        result.sse_history.append(sse)
        result.n_iters = it + 1
        if prev_sse - sse <= config.tol * max(sse, 1e-12):
            break
        prev_sse = sse
        sums, counts = _cluster_sums(x, labels, k)
        nonempty = counts > 0
        centroids = centroids.astype(np.float64)
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            # move each empty centroid onto the worst-served point
            takeable = dists.copy()
            for e in empties:
                far = int(takeable.argmax())
                centroids[e] = x[far].astype(np.float64)
                takeable[far] = -1.0
        centroids = as_f32c(centroids)
        result.centroids = centroids
    result.centroids = as_f32c(result.centroids)
    return result


def assign_nearest(points: np.ndarray, centroids: np.ndarray, metric: Metric) -> np.ndarray:
    """Index of the closest centroid per point under the serving metric.

    Ties go to the lowest index (argmax returns the first maximum).
    """
    points = np.atleast_2d(np.asarray(points))
    c64 = centroids.astype(np.float64)
    p64 = points.astype(np.float64)
    if metric is Metric.IP:
        scores = p64 @ c64.T
    else:
        p_sq = (p64 * p64).sum(axis=1)
        c_sq = (c64 * c64).sum(axis=1)
        scores = -(p_sq[:, None] + c_sq[None, :] - 2.0 * (p64 @ c64.T))
    return scores.argmax(axis=1).astype(np.int64)


def sample_rows(n_total: int, n_sample: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a uniform sample without replacement, capped at n_total."""
    n_sample = min(n_sample, n_total)
    return rng.permutation(n_total)[:n_sample]
