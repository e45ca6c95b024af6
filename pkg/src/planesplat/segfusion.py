"""Merge raw per-view segments into plane-consistent labels.

Segments become nodes of a region adjacency graph (RAG). An edge between two
4-adjacent segments survives only if their mean rendered normals and mean
planar distances agree; connected components of the pruned graph are the
merged segments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .field import CameraView

DEFAULT_THETA_N = math.radians(20.0)
DEFAULT_THETA_D = 0.10
DEFAULT_V_MAX = math.radians(25.0)


def planar_distance_map(depth: np.ndarray, normal: np.ndarray, view: CameraView,
                        normal_frame: str = "world") -> np.ndarray:
    """Per-pixel plane offset d_p with n . p + d_p = 0 in the camera frame.

    ``depth`` is camera-frame z (NaN where invalid); ``normal`` is (H, W, 3),
    rotated into the camera frame first when ``normal_frame == "world"``.
    With pixel rays (u - u0)/fx, (v - v0)/fy, 1 this is
    ``depth * (n1 (u0 - u)/fx + n2 (v0 - v)/fy - n3)``.
    """
    H, W = depth.shape
    n = normal @ view.rotation.T if normal_frame == "world" else normal
    u = np.arange(W)[None, :]
    v = np.arange(H)[:, None]
    return depth * (n[..., 0] / view.fx * (view.u0 - u) + n[..., 1] / view.fy * (view.v0 - v) - n[..., 2])


@dataclass
class RagNode:
    segment: int
    pixel_count: int
    normal: np.ndarray
    planar_distance: float
    normal_variance: float
    valid: bool


@dataclass
class Rag:
    labels: np.ndarray        # raw label map the graph was built from
    nodes: dict[int, RagNode]
    edges: np.ndarray         # (E, 2) segment ids, i < j


def adjacent_pairs(labels: np.ndarray) -> np.ndarray:
    """Unique (i, j), i < j, of non-zero labels sharing a 4-connected boundary."""
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        m = (a != b) & (a > 0) & (b > 0)
        pairs.append(np.stack([np.minimum(a[m], b[m]), np.maximum(a[m], b[m])], axis=1))
    allp = np.concatenate(pairs)
    if len(allp) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(allp, axis=0).astype(np.int64)


def build_rag(labels: np.ndarray, normal: np.ndarray, planar_distance: np.ndarray,
              v_max: float = DEFAULT_V_MAX) -> Rag:
    """Nodes carry pixel-averaged normal and planar distance of each segment.

    Only pixels with finite planar distance contribute to the averages. A node
    is invalid when its mean angular deviation from the mean normal exceeds
    ``v_max`` or it has no usable pixel.
    """
    labels = np.asarray(labels, dtype=np.int64)
    flat = labels.ravel()
    dp = planar_distance.ravel()
    nrm = normal.reshape(-1, 3)
    ok = (flat > 0) & np.isfinite(dp) & np.isfinite(nrm).all(axis=1)
    m = int(flat.max(initial=0)) + 1
    count = np.bincount(flat[flat > 0], minlength=m)
    used = np.bincount(flat[ok], minlength=m).astype(np.float64)
    sums = np.stack([np.bincount(flat[ok], weights=nrm[ok, j], minlength=m) for j in range(3)], axis=1)
    dsum = np.bincount(flat[ok], weights=dp[ok], minlength=m)
    mean_n = sums / np.maximum(np.linalg.norm(sums, axis=1, keepdims=True), 1e-12)
    cosang = np.clip((nrm[ok] * mean_n[flat[ok]]).sum(axis=1), -1.0, 1.0)
    dev = np.bincount(flat[ok], weights=np.arccos(cosang), minlength=m) / np.maximum(used, 1)
    nodes = {}
    for s in np.flatnonzero(count):
        s = int(s)
        good = used[s] > 0 and np.linalg.norm(sums[s]) > 1e-12 and dev[s] <= v_max
        nodes[s] = RagNode(s, int(count[s]), mean_n[s], float(dsum[s] / max(used[s], 1)), float(dev[s]), bool(good))
    return Rag(labels, nodes, adjacent_pairs(labels))


def partition_rag(rag: Rag, theta_n: float = DEFAULT_THETA_N, theta_d: float = DEFAULT_THETA_D) -> np.ndarray:
    """Merged label map: connected components over edges passing both tests.

    Merged ids are dense 1..m', numbered by the smallest raw id they contain;
    invalid nodes map to 0.
    """
    labels = rag.labels
    m = int(labels.max(initial=0)) + 1
    valid = np.zeros(m, dtype=bool)
    for s, node in rag.nodes.items():
        valid[s] = node.valid
    keep = []
    for i, j in rag.edges:
        a, b = rag.nodes[int(i)], rag.nodes[int(j)]
        if not (a.valid and b.valid):
            continue
        angle = math.acos(max(-1.0, min(1.0, float(a.normal @ b.normal))))
        if angle <= theta_n and abs(a.planar_distance - b.planar_distance) <= theta_d:
            keep.append((i, j))
    keep = np.asarray(keep, dtype=np.int64).reshape(-1, 2)
    graph = coo_matrix((np.ones(len(keep)), (keep[:, 0], keep[:, 1])), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    # renumber components by first valid member
    lut = np.zeros(m, dtype=np.int64)
    seen: dict[int, int] = {}
    for s in np.flatnonzero(valid):
        c = int(comp[s])
        if c not in seen:
            seen[c] = len(seen) + 1
        lut[s] = seen[c]
    return lut[labels]


def merge_segments(labels: np.ndarray, depth: np.ndarray, normal: np.ndarray, view: CameraView,
                   theta_n: float = DEFAULT_THETA_N, theta_d: float = DEFAULT_THETA_D,
                   v_max: float = DEFAULT_V_MAX) -> np.ndarray:
    """Raw masks plus rendered depth/normals of one view -> merged label map."""
    dp = planar_distance_map(depth, normal, view)
    return partition_rag(build_rag(labels, normal, dp, v_max), theta_n, theta_d)


def one_hot_targets(merged: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-hot rows for every labelled pixel, plus their flat pixel indices.

    An all-invalid map gives an empty (0, 0) matrix.
    """
    flat = np.asarray(merged).ravel()
    pix = np.flatnonzero(flat > 0)
    if len(pix) == 0:
        return np.zeros((0, 0)), pix
    m = int(flat.max())
    Y = np.zeros((len(pix), m))
    Y[np.arange(len(pix)), flat[pix] - 1] = 1.0
    return Y, pix
