"""Partition comparison (RI, VOI, SC) and geometric accuracy/completeness."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def densify(labels, unassigned: str = "cluster") -> np.ndarray:
    """Map arbitrary labels to 0..C-1.

    Negative labels mean "unassigned": with ``unassigned="cluster"`` they share
    one extra cluster, with ``"drop"`` they are returned as -1 for the caller
    to filter.
    """
    labels = np.asarray(labels).ravel()
    if unassigned not in ("cluster", "drop"):
        raise ValueError(f"unknown unassigned mode {unassigned!r}")
    out = np.empty(len(labels), dtype=np.int64)
    neg = labels < 0
    _, inv = np.unique(labels[~neg], return_inverse=True)
    out[~neg] = inv
    out[neg] = (inv.max(initial=-1) + 1) if unassigned == "cluster" else -1
    return out


def contingency(p, q) -> np.ndarray:
    p = densify(p)
    q = densify(q)
    if len(p) != len(q):
        raise ValueError("partitions must cover the same elements")
    if len(p) < 2:
        raise ValueError("need at least two elements")
    table = np.zeros((p.max() + 1, q.max() + 1), dtype=np.int64)
    np.add.at(table, (p, q), 1)
    return table


def _pairs(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def rand_index(p, q) -> float:
    t = contingency(p, q)
    n = t.sum()
    total = _pairs(n)
    both = _pairs(t).sum()
    same_p = _pairs(t.sum(axis=1)).sum()
    same_q = _pairs(t.sum(axis=0)).sum()
    agree = total + 2 * both - same_p - same_q
    return float(agree / total)


def variation_of_information(p, q) -> float:
    """H(P|Q) + H(Q|P) in nats."""
    t = contingency(p, q).astype(np.float64)
    n = t.sum()
    r = t / n
    a = r.sum(axis=1)
    b = r.sum(axis=0)
    nz = r > 0
    ii, jj = np.nonzero(nz)
    rv = r[nz]
    voi = -(rv * (np.log(rv / a[ii]) + np.log(rv / b[jj]))).sum()
    return float(voi) if voi > 0 else 0.0


def segmentation_covering(gt, pred) -> float:
    """sum over gt regions of |R|/N times the best IoU with a predicted region."""
    t = contingency(gt, pred).astype(np.float64)
    n = t.sum()
    size_g = t.sum(axis=1)
    size_p = t.sum(axis=0)
    iou = t / (size_g[:, None] + size_p[None, :] - t)
    return float((size_g * iou.max(axis=1)).sum() / n)


def accuracy_completeness(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Mean nearest-neighbour distance pred->gt (accuracy) and gt->pred (completeness)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("accuracy/completeness need non-empty point sets")
    acc = cKDTree(gt).query(pred, k=1)[0].mean()
    comp = cKDTree(pred).query(gt, k=1)[0].mean()
    return float(acc), float(comp)


def sample_polygon(polygon: np.ndarray, spacing: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Points on a planar convex polygon, on a regular grid (or uniformly random with ``rng``)."""
    poly = np.asarray(polygon, dtype=np.float64)
    o = poly[0]
    e1 = poly[1] - o
    e1 /= np.linalg.norm(e1)
    n = np.cross(poly[1] - o, poly[2] - o)
    n /= np.linalg.norm(n)
    e2 = np.cross(n, e1)
    uv = np.stack([(poly - o) @ e1, (poly - o) @ e2], axis=1)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    if rng is None:
        gu = np.arange(lo[0] + spacing / 2, hi[0], spacing)
        gv = np.arange(lo[1] + spacing / 2, hi[1], spacing)
        cand = np.stack(np.meshgrid(gu, gv, indexing="ij"), axis=-1).reshape(-1, 2)
    else:
        count = int(np.prod(hi - lo) / spacing ** 2) + 1
        cand = rng.uniform(lo, hi, size=(count, 2))
    area2 = (uv[:, 0] * np.roll(uv[:, 1], -1) - np.roll(uv[:, 0], -1) * uv[:, 1]).sum()
    sign = 1.0 if area2 >= 0 else -1.0
    inside = np.ones(len(cand), dtype=bool)
    for a, b in zip(uv, np.roll(uv, -1, axis=0)):
        cross = (b[0] - a[0]) * (cand[:, 1] - a[1]) - (b[1] - a[1]) * (cand[:, 0] - a[0])
        inside &= sign * cross >= -1e-12
    c = cand[inside]
    return o + c[:, :1] * e1 + c[:, 1:] * e2


def report(gt_labels, pred_labels, accuracy=None, completeness=None, n_planes_gt=None,
           unassigned: str = "cluster") -> dict:
    gt_labels = np.asarray(gt_labels)
    pred_labels = np.asarray(pred_labels)
    n_unassigned = int((pred_labels < 0).sum())
    if unassigned == "drop":
        keep = pred_labels >= 0
        gt_labels, pred_labels = gt_labels[keep], pred_labels[keep]
    out = {
        "ri": rand_index(gt_labels, pred_labels),
        "voi": variation_of_information(gt_labels, pred_labels),
        "sc": segmentation_covering(gt_labels, pred_labels),
        "accuracy": accuracy,
        "completeness": completeness,
        "n_planes_pred": int(len(np.unique(pred_labels[pred_labels >= 0]))),
        "n_planes_gt": int(n_planes_gt if n_planes_gt is not None else len(np.unique(gt_labels[gt_labels >= 0]))),
        "n_unassigned": n_unassigned,
    }
    return out
