"""Gaussian Mixture Tree: plane instances from hierarchically merged Gaussians.

Leaves are Gaussians fitted to the 3D-lifted boundary pixels of merged
segments in every view. They are merged greedily, bottom-up, while the
Bhattacharyya distance and descriptor cosine distance stay under their
thresholds; each surviving top-level node is one plane instance.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .field import CameraView, Scene, normalize_rows
from .render import RenderedMaps

log = logging.getLogger(__name__)

LEAF_EPS = 1e-6
DEFAULT_EPS_B = 1.0
DEFAULT_EPS_Z = 0.05
DEFAULT_P_MIN = 50
MIN_BOUNDARY_POINTS = 8
DEFAULT_THETA_ASSIGN = 0.7
DEFAULT_R_MIN = 1e-9
DEFAULT_MIN_VIEWS = 8
UNASSIGNED = -1

_ids = itertools.count()


class NotSPDError(ValueError):
    pass


@dataclass(eq=False)
class GaussianNode:
    mean: np.ndarray
    cov: np.ndarray
    normal: np.ndarray
    descriptor: np.ndarray
    leaf_count: int = 1
    children: tuple["GaussianNode", ...] = ()
    source: tuple[int, int] | None = None   # (view, merged segment) for leaves
    id: int = field(default_factory=lambda: next(_ids))

    def leaves(self) -> list["GaussianNode"]:
        if not self.children:
            return [self]
        return [leaf for c in self.children for leaf in c.leaves()]

    @property
    def view_support(self) -> int:
        """Number of distinct views contributing leaves."""
        return len({leaf.source[0] for leaf in self.leaves() if leaf.source is not None})

    @property
    def extent(self) -> float:
        return float(np.trace(self.cov))


def _check_spd(cov: np.ndarray) -> None:
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotSPDError("covariance is not symmetric positive definite") from None


def bhattacharyya(a: GaussianNode, b: GaussianNode) -> float:
    """Bhattacharyya distance between two Gaussian nodes."""
    return bhattacharyya_params(a.mean, a.cov, b.mean, b.cov)


def bhattacharyya_params(mu_i, cov_i, mu_j, cov_j) -> float:
    cov_i = np.asarray(cov_i, dtype=np.float64)
    cov_j = np.asarray(cov_j, dtype=np.float64)
    _check_spd(cov_i)
    _check_spd(cov_j)
    avg = 0.5 * (cov_i + cov_j)
    diff = np.asarray(mu_i, dtype=np.float64) - np.asarray(mu_j, dtype=np.float64)
    maha = float(diff @ np.linalg.solve(avg, diff))
    ld = np.linalg.slogdet(avg)[1]
    ld_i = np.linalg.slogdet(cov_i)[1]
    ld_j = np.linalg.slogdet(cov_j)[1]
    return 0.125 * maha + 0.5 * (ld - 0.5 * (ld_i + ld_j))


def merge_params(mu_i, cov_i, mu_j, cov_j):
    """Product-of-Gaussians merge; evaluated so swapping i and j is bit-exact."""
    inv = np.linalg.inv(cov_i + cov_j)
    a = cov_j @ inv @ cov_i
    b = cov_i @ inv @ cov_j
    cov = 0.5 * (a + b)
    mean = cov_j @ inv @ mu_i + cov_i @ inv @ mu_j
    return mean, cov


def merge_nodes(a: GaussianNode, b: GaussianNode) -> GaussianNode:
    mean, cov = merge_params(a.mean, a.cov, b.mean, b.cov)
    na, nb = a.leaf_count, b.leaf_count
    normal = normalize_rows(na * a.normal + nb * b.normal)
    desc = normalize_rows(na * a.descriptor + nb * b.descriptor)
    children = tuple(sorted((a, b), key=lambda n: n.id))
    return GaussianNode(mean, cov, normal, desc, na + nb, children)


def boundary_mask(labels: np.ndarray, segment: int) -> np.ndarray:
    """Pixels of ``segment`` with a 4-neighbour of another label or the image edge."""
    inside = labels == segment
    pad = np.pad(inside, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return inside & ~interior


def leaves_for_view(view: CameraView, merged: np.ndarray, maps: RenderedMaps, view_index: int = 0,
                    p_min: int = DEFAULT_P_MIN, eps: float = LEAF_EPS) -> list[GaussianNode]:
    out = []
    valid_depth = np.isfinite(maps.depth)
    for s in range(1, int(merged.max(initial=0)) + 1):
        seg = merged == s
        if seg.sum() < p_min:
            continue
        edge = boundary_mask(merged, s) & valid_depth
        if edge.sum() < MIN_BOUNDARY_POINTS:
            continue
        v, u = np.nonzero(edge)
        pts = view.backproject(u, v, maps.depth[v, u])
        mean = pts.mean(axis=0)
        d = pts - mean
        cov = d.T @ d / len(pts) + eps * np.eye(3)
        normal = normalize_rows(maps.normal[seg].mean(axis=0))
        desc = normalize_rows(maps.descriptor[seg].mean(axis=0))
        out.append(GaussianNode(mean, cov, normal, desc, 1, (), (view_index, s)))
    return out


def build_leaves(views: Sequence[CameraView], merged: Sequence[np.ndarray], maps: Sequence[RenderedMaps],
                 p_min: int = DEFAULT_P_MIN, eps: float = LEAF_EPS) -> list[GaussianNode]:
    """Leaf Gaussians from the lifted boundary points of every merged segment."""
    leaves = []
    for i, (view, lab, m) in enumerate(zip(views, merged, maps)):
        leaves.extend(leaves_for_view(view, lab, m, i, p_min, eps))
    return leaves


def order_leaves(leaves: Sequence[GaussianNode], order: str = "extent", seed: int = 0) -> list[GaussianNode]:
    """Visiting order: ``extent`` (trace of covariance, largest first), ``index`` or ``random``."""
    if order == "extent":
        keys = np.array([-leaf.extent for leaf in leaves])
        return [leaves[i] for i in np.argsort(keys, kind="stable")]
    if order == "index":
        return list(leaves)
    if order == "random":
        perm = np.random.default_rng(seed).permutation(len(leaves))
        return [leaves[i] for i in perm]
    raise ValueError(f"unknown leaf order {order!r}")


@dataclass(eq=False)
class PlaneSet:
    nodes: list[GaussianNode]
    weights: np.ndarray
    labels: np.ndarray | None = None
    params: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)
    rejected: list[GaussianNode] = field(default_factory=list)   # root children below the view-support floor

    def __len__(self) -> int:
        return len(self.nodes)

    def to_json(self, labels_ply: str | None = None) -> dict:
        planes = []
        for k, (node, pi) in enumerate(zip(self.nodes, self.weights)):
            entry = {"id": k, "pi": float(pi), "mu": node.mean.tolist(), "cov": node.cov.ravel().tolist(),
                     "normal": None, "offset": None, "leaf_count": int(node.leaf_count),
                     "descriptor": node.descriptor.tolist()}
            if k in self.params:
                n, d = self.params[k]
                entry["normal"], entry["offset"] = n.tolist(), float(d)
            planes.append(entry)
        return {"planes": planes, "labels_ply": labels_ply,
                "rejected": [{"leaf_count": int(r.leaf_count), "views": r.view_support} for r in self.rejected]}


def build_tree(leaves: Sequence[GaussianNode], eps_b: float = DEFAULT_EPS_B, eps_z: float = DEFAULT_EPS_Z,
               order: str = "extent", seed: int = 0, min_views: int = 0) -> PlaneSet:
    """Greedy hierarchical merge; returns the root's children as plane nodes.

    With ``min_views > 0`` root children assembled from fewer distinct views
    are moved to ``PlaneSet.rejected`` and take no part in the mixture.
    """
    if not leaves:
        raise ValueError("cannot build a tree from zero leaves")
    leaves = order_leaves(leaves, order, seed)
    n = len(leaves)
    taken = np.zeros(n, dtype=bool)
    planes = []
    for i in range(n):
        if taken[i]:
            continue
        taken[i] = True
        g = leaves[i]
        for j in range(i + 1, n):
            if taken[j]:
                continue
            other = leaves[j]
            if 1.0 - float(g.descriptor @ other.descriptor) > eps_z:
                continue
            if bhattacharyya(g, other) <= eps_b:
                g = merge_nodes(g, other)
                taken[j] = True
        planes.append(g)
    supported = [p.view_support >= min_views for p in planes]
    kept = [p for p, ok in zip(planes, supported) if ok]
    rejected = [p for p, ok in zip(planes, supported) if not ok]
    if not kept:
        raise ValueError(f"no root child is supported by {min_views} views")
    counts = np.array([p.leaf_count for p in kept], dtype=np.float64)
    return PlaneSet(kept, counts / counts.sum(), rejected=rejected)


def log_densities(points: np.ndarray, planes: PlaneSet) -> np.ndarray:
    """(N, L) matrix of ln pi_k + ln N(x | mu_k, Sigma_k)."""
    out = np.empty((len(points), len(planes)))
    for k, (node, pi) in enumerate(zip(planes.nodes, planes.weights)):
        L = np.linalg.cholesky(node.cov)
        y = np.linalg.solve(L, (points - node.mean).T)
        maha = (y * y).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, k] = math.log(pi) - 0.5 * (maha + logdet + 3 * math.log(2 * math.pi))
    return out


def assign_primitives(scene: Scene, planes: PlaneSet, theta_assign: float = DEFAULT_THETA_ASSIGN,
                      r_min: float = DEFAULT_R_MIN) -> np.ndarray:
    """Plane label per primitive, -1 when unassigned.

    Planes whose descriptor is within cosine distance ``theta_assign`` of the
    primitive's are candidates and the best mixture score among them wins.
    Without candidates the best plane overall is taken if its weighted
    density reaches ``r_min``.
    """
    scores = log_densities(scene.centers, planes)
    desc = np.stack([n.descriptor for n in planes.nodes])
    cand = scene.descriptors @ desc.T >= 1.0 - theta_assign
    gated = np.where(cand, scores, -np.inf)
    labels = np.argmax(gated, axis=1)
    none = ~cand.any(axis=1)
    best = np.argmax(scores, axis=1)
    best_score = scores[np.arange(len(scores)), best]
    fallback = np.where(best_score >= math.log(r_min), best, UNASSIGNED)
    labels = np.where(none, fallback, labels)
    planes.labels = labels
    return labels


def fit_plane_params(points: np.ndarray, normals: np.ndarray, labels: np.ndarray,
                     n_planes: int) -> dict[int, tuple[np.ndarray, float]]:
    """PCA plane (unit normal, offset) per label with at least three members."""
    params = {}
    for k in range(n_planes):
        members = labels == k
        if members.sum() < 3:
            if members.any():
                log.warning("plane %d has %d members; dropped from geometric evaluation", k, int(members.sum()))
            continue
        P = points[members]
        c = P.mean(axis=0)
        _, vecs = np.linalg.eigh((P - c).T @ (P - c))
        n = vecs[:, 0]
        if n @ normals[members].mean(axis=0) < 0:
            n = -n
        params[k] = (n, -float(n @ c))
    return params


def project_to_planes(points: np.ndarray, labels: np.ndarray, params: dict[int, tuple[np.ndarray, float]]):
    """Members of fitted planes projected onto their plane; others dropped."""
    out = []
    for k, (n, d) in params.items():
        P = points[labels == k]
        out.append(P - (P @ n + d)[:, None] * n)
    return np.concatenate(out) if out else np.zeros((0, 3))


def plane_palette(n: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return rng.integers(40, 256, size=(n, 3)).astype(np.uint8)


def save_plane_set(planes: PlaneSet, path, labels_ply: str | None = None) -> None:
    Path(path).write_text(json.dumps(planes.to_json(labels_ply), indent=1))


def save_labels_ply(path, points: np.ndarray, labels: np.ndarray) -> None:
    """Binary PLY of points coloured by label (unassigned grey) with an int ``label``."""
    labels = np.asarray(labels, dtype=np.int64)
    pal = plane_palette(max(int(labels.max(initial=-1)) + 1, 1))
    rgb = np.where(labels[:, None] >= 0, pal[np.maximum(labels, 0)], 128).astype(np.uint8)
    rec = np.empty(len(points), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("red", "u1"),
                                       ("green", "u1"), ("blue", "u1"), ("label", "<i4")])
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rec["label"] = labels
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(points)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "property int label\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())
