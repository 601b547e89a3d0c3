from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    sse_history: list[float]
    iterations: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.stack([((x - ci) ** 2).sum(axis=1) for ci in c], axis=1)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_fit(vectors, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    Distance ties go to the lower centroid index; an emptied cluster is
    re-seeded with the point farthest from its current centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must all have the same length")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} vectors")
    rng = np.random.default_rng(seed)
    centroids = _plusplus(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        taken: set[int] = set()
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        for j in range(k):
            if not (assign == j).any():
                own = d[np.arange(n), assign]
                for idx in np.argsort(-own, kind="stable"):
                    if int(idx) not in taken:
                        break
                taken.add(int(idx))
                centroids[j] = x[idx]
                assign[idx] = j
    return KMeansResult(assign, centroids, history, it)
