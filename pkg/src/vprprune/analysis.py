"""How much pruning moves the embedding: PCA down-projection + similarity Procrustes."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def pca_project(x, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Project mean-centered rows onto the top ``dim`` principal directions.

    Returns the (N, dim) scores and the explained-variance fraction of each kept
    component. Component signs are fixed so the largest-magnitude loading is positive.
    With fewer rows than ``dim`` the data has at most N components; the remaining
    columns carry zero variance and are returned as zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= dim <= d:
        raise ValueError(f"target dim {dim} outside 1..{d}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    flip = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    vt = vt * flip[:, None]
    k = min(dim, len(vt))
    var = np.zeros(dim)
    var[:k] = s[:k] ** 2
    total = np.sum(s**2)
    frac = var / total if total > 0 else var
    scores = np.zeros((n, dim))
    scores[:, :k] = xc @ vt[:k].T
    return scores, frac


@dataclass
class Procrustes:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    disparity: float

    def apply(self, a) -> np.ndarray:
        return self.scale * np.asarray(a, dtype=np.float64) @ self.rotation + self.translation


def procrustes_align(a, b) -> Procrustes:
    """Orthogonal Q, scale s and shift t minimizing ||s A Q + t - B||^2 (closed form).

    With fewer points than dimensions Q is not unique, but the returned one is still
    a minimizer and the disparity is well defined.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ac, bc = a - mu_a, b - mu_b
    norm_a = np.sum(ac * ac)
    if norm_a == 0 or np.sum(bc * bc) == 0:
        raise ValueError("degenerate input: zero variance")
    u, s, vt = np.linalg.svd(ac.T @ bc)
    q = u @ vt
    scale = s.sum() / norm_a
    t = mu_b - scale * mu_a @ q
    resid = scale * ac @ q - bc
    return Procrustes(q, float(scale), t, float(np.sum(resid * resid)))


@dataclass
class AlignmentReport:
    aligned_dense: np.ndarray
    pruned: np.ndarray
    residuals: np.ndarray
    disparity: float
    scale: float
    explained_variance: np.ndarray

    @property
    def max_item(self) -> int:
        return int(residual_rank(self)[0])

    @property
    def min_item(self) -> int:
        return int(residual_rank(self)[-1])


def align_embeddings(dense, pruned) -> AlignmentReport:
    """Project the dense embedding down to the pruned dimension, then Procrustes-align it."""
    dense = np.asarray(dense, dtype=np.float64)
    pruned = np.asarray(pruned, dtype=np.float64)
    if len(dense) != len(pruned):
        raise ValueError("dense and pruned embeddings must cover the same items")
    d = pruned.shape[1]
    if dense.shape[1] < d:
        raise ValueError("dense embedding is narrower than the pruned one")
    proj, frac = pca_project(dense, d)
    fit = procrustes_align(proj, pruned)
    aligned = fit.apply(proj)
    residuals = np.linalg.norm(aligned - pruned, axis=1)
    return AlignmentReport(aligned, pruned, residuals, fit.disparity, fit.scale, frac)


def residual_rank(report: AlignmentReport) -> np.ndarray:
    """Item indices by residual, largest first; equal residuals keep index order."""
    return np.argsort(-report.residuals, kind="stable")


def write_residual_csv(report: AlignmentReport, path, item_ids=None) -> None:
    order = residual_rank(report)
    ids = np.arange(len(report.residuals)) if item_ids is None else np.asarray(item_ids)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["item_id", "residual", "rank"])
        for rank, i in enumerate(order, start=1):
            wr.writerow([ids[i], f"{report.residuals[i]:.9g}", rank])
