"""Seeded k-means utilities.

Two variants share the same plus-plus seeding and Lloyd update:

* :func:`kmeans` -- standard Lloyd iterations; empty clusters are re-seeded
  from the point with the largest quantization error.
* :func:`constrained_kmeans` -- every cluster must keep at least ``min_size``
  members; the assignment step is solved exactly as a minimum-cost flow.

Both end with a mean update over the final assignment, which guarantees the
returned objective never exceeds the input energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .errors import ConfigError


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, clipped at 0 against float noise."""
    p2 = np.sum(points**2, axis=1, keepdims=True)
    c2 = np.sum(centroids**2, axis=1)
    d2 = p2 - 2.0 * points @ centroids.T + c2[None, :]
    return np.maximum(d2, 0.0)


def assign_nearest(points: np.ndarray, centroids: np.ndarray):
    """Nearest centroid per point (ties -> lowest index) and its sq distance."""
    d2 = squared_distances(points, centroids)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(points)), labels]


def plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: points sampled with probability proportional to D^2."""
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    first = rng.integers(n)
    centroids[0] = points[first]
    d2 = squared_distances(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, squared_distances(points, centroids[j : j + 1]).ravel())
    return centroids


@dataclass(frozen=True)
class KmeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int) -> KmeansResult:
    k = len(centroids)
    labels = np.full(len(points), -1)
    it = 0
    for it in range(1, max_iter + 1):
        new_labels, d2 = assign_nearest(points, centroids)
        # re-seed empty clusters from the largest-error points
        counts = np.bincount(new_labels, minlength=k)
        if np.any(counts == 0):
            err_order = np.argsort(-d2, kind="stable")
            cursor = 0
            for j in np.flatnonzero(counts == 0):
                centroids[j] = points[err_order[cursor]]
                cursor += 1
            new_labels, d2 = assign_nearest(points, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    # closing mean update: centroids are cluster means of a real assignment,
    # so the reported inertia can never exceed the input energy
    labels, _ = assign_nearest(points, centroids)
    for j in range(k):
        members = points[labels == j]
        if len(members):
            centroids[j] = members.mean(axis=0)
    labels, d2 = assign_nearest(points, centroids)
    return KmeansResult(centroids, labels, float(d2.sum()), it)


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    n_init: int = 8,
    max_iter: int = 100,
) -> KmeansResult:
    """Seeded k-means with restarts; returns the lowest-inertia run."""
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(points) < k:
        raise ConfigError(f"k={k} exceeds {len(points)} samples")
    rng = np.random.default_rng(seed)
    best: KmeansResult | None = None
    for _ in range(max(1, n_init)):
        result = _lloyd(points, plus_plus_init(points, k, rng), max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


# ---------------------------------------------------------------------------
# minimum-size-constrained k-means

_COST_SCALE_TARGET = 1e12  # integer cost resolution for the flow solver


def _flow_assign(d2: np.ndarray, min_size: int) -> np.ndarray:
    """Exact assignment minimizing total squared distance s.t. cluster sizes.

    Transportation problem: each point ships one unit either into a cluster's
    quota (demand ``min_size``) or through it to the surplus sink.
    """
    n, k = d2.shape
    scale = _COST_SCALE_TARGET / max(d2.max(), 1e-12)
    costs = np.round(d2 * scale).astype(np.int64)

    g = nx.DiGraph()
    for i in range(n):
        g.add_node(("p", i), demand=-1)
    for j in range(k):
        g.add_node(("c", j), demand=min_size)
    g.add_node("surplus", demand=n - k * min_size)
    for i in range(n):
        for j in range(k):
            g.add_edge(("p", i), ("c", j), capacity=1, weight=int(costs[i, j]))
    for j in range(k):
        g.add_edge(("c", j), "surplus", capacity=n, weight=0)

    flow = nx.min_cost_flow(g)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        for (kind, j), units in flow[("p", i)].items():
            if units:
                labels[i] = j
                break
    return labels


@dataclass(frozen=True)
class ConstrainedResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    iterations: int


def _constrained_once(
    points: np.ndarray, centroids: np.ndarray, min_size: int, max_iter: int
) -> ConstrainedResult:
    k = len(centroids)
    labels = np.full(len(points), -1)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = squared_distances(points, centroids)
        new_labels = _flow_assign(d2, min_size)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    d2 = squared_distances(points, centroids)
    objective = float(d2[np.arange(len(points)), labels].sum())
    return ConstrainedResult(centroids, labels, objective, it)


def constrained_kmeans(
    points: np.ndarray,
    k: int,
    min_size: int,
    seed: int = 0,
    max_iter: int = 50,
    n_init: int = 4,
) -> ConstrainedResult:
    """k-means where every cluster keeps at least ``min_size`` members."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if min_size < 0 or k * min_size > n:
        raise ConfigError(f"infeasible: {k} clusters x min size {min_size} > {n} points")
    rng = np.random.default_rng(seed)
    best: ConstrainedResult | None = None
    for _ in range(max(1, n_init)):
        result = _constrained_once(points, plus_plus_init(points, k, rng), min_size, max_iter)
        if best is None or result.objective < best.objective:
            best = result
    return best
