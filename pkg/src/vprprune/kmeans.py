from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a chosen center
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, init=None) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding (or ``init``).

    ``history`` holds the objective after every assignment step; it never
    increases. An empty cluster is moved onto the point farthest from its center.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = np.array(init, dtype=np.float64) if init is not None else kmeans_plusplus(x, k, rng)
    if centers.shape != (k, x.shape[1]):
        raise ValueError(f"init centers have shape {centers.shape}, expected {(k, x.shape[1])}")

    d = _sq_dists(x, centers)
    labels = np.argmin(d, axis=1)
    history = [float(d[np.arange(n), labels].sum())]
    for _ in range(max_iter):
        for z in range(k):
            members = labels == z
            if members.any():
                centers[z] = x[members].mean(axis=0)
        counts = np.bincount(labels, minlength=k)
        for z in np.flatnonzero(counts == 0):
            own = _sq_dists(x, centers)[np.arange(n), labels]
            far = int(np.argmax(own))
            centers[z] = x[far]
            labels[far] = z
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(centers, labels, history[-1], history)
