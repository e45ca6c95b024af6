"""Neighbourhood operations over Gaussian centres."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_K = 30
_SLACK = 8


@dataclass
class KnnIndex:
    """Exact K nearest neighbours, ascending distance, ties by index, no self."""

    k: int
    neighbors: np.ndarray   # (N, min(k, N-1))
    built_at: int = 0


def _sq_dist(points: np.ndarray, rows: np.ndarray, cand: np.ndarray) -> np.ndarray:
    d = points[cand] - points[rows][:, None, :]
    return (d * d).sum(axis=-1)


def brute_force_knn(points: np.ndarray, k: int) -> np.ndarray:
    """O(N^2) reference neighbour table with the same ordering rule."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k = min(k, n - 1)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        d = ((points - points[i]) ** 2).sum(axis=1)
        order = np.lexsort((idx, d))
        out[i] = order[order != i][:k]
    return out


def build_knn(points: np.ndarray, k: int = DEFAULT_K, built_at: int = 0) -> KnnIndex:
    """Exact KNN over centres using a k-d tree for candidate generation.

    Candidates are re-ranked on squared distances computed the same way as
    :func:`brute_force_knn`; rows whose K-th neighbour sits at the edge of the
    candidate set are resolved by brute force so ties never depend on the tree.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise ValueError("KNN needs at least two points")
    k_eff = min(k, n - 1)
    q = min(n, k_eff + 1 + _SLACK)
    tree = cKDTree(points)
    _, cand = tree.query(points, k=q)
    cand = np.asarray(cand, dtype=np.int64).reshape(n, q)
    rows = np.arange(n)
    d2 = _sq_dist(points, rows, cand)
    d2 = np.where(cand == rows[:, None], np.inf, d2)
    order = np.lexsort((cand, d2), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    nbrs = cand[:, :k_eff].copy()
    if q < n:
        # the tree's farthest candidate must be strictly beyond the K-th neighbour
        far = np.where(np.isfinite(d2[:, -1]), d2[:, -1], d2[:, -2])
        kth = d2[:, k_eff - 1]
        unsure = np.flatnonzero(far <= kth * (1 + 1e-9) + 1e-300)
        for i in unsure:
            d = ((points - points[i]) ** 2).sum(axis=1)
            o = np.lexsort((rows, d))
            nbrs[i] = o[o != i][:k_eff]
    return KnnIndex(k, nbrs, built_at)


def _fix_sign(vecs: np.ndarray) -> np.ndarray:
    """Flip each vector so its largest-magnitude component is positive."""
    pick = np.abs(vecs).argmax(axis=-1)
    sgn = np.sign(np.take_along_axis(vecs, pick[..., None], axis=-1))
    return vecs * np.where(sgn == 0, 1.0, sgn)


def local_frames(points: np.ndarray, neighbors: np.ndarray):
    """Neighbourhood centroid, eigenvalues (ascending) and eigenvectors per point."""
    P = points[neighbors]
    centroid = P.mean(axis=1)
    D = P - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", D, D) / neighbors.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    return centroid, evals, evecs


def planar_align(points: np.ndarray, knn: KnnIndex, rel_tol: float = 1e-12) -> np.ndarray:
    """Project each centre onto the tangent plane fitted to its neighbours.

    The plane passes through the neighbour centroid and is spanned by the two
    leading principal directions. Neighbourhoods that are coincident or
    collinear leave the point where it is.
    """
    points = np.asarray(points, dtype=np.float64)
    centroid, evals, evecs = local_frames(points, knn.neighbors)
    normal = _fix_sign(evecs[:, :, 0])
    offset = ((points - centroid) * normal).sum(axis=1)
    ok = (evals[:, 2] > 0) & (evals[:, 1] > rel_tol * evals[:, 2])
    out = points.copy()
    out[ok] -= offset[ok, None] * normal[ok]
    return out


def laplacian_smooth(features: np.ndarray, knn: KnnIndex, eps: float = 1e-8) -> np.ndarray:
    """Replace each unit feature with the normalised mean of itself and its neighbours."""
    features = np.asarray(features, dtype=np.float64)
    total = features + features[knn.neighbors].sum(axis=1)
    mean = total / (knn.neighbors.shape[1] + 1)
    norm = np.linalg.norm(mean, axis=1, keepdims=True)
    return np.where(norm >= eps, mean / np.maximum(norm, eps), features)


def plane_residuals(points: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    return np.abs(points @ normal + offset)
