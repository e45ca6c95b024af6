"""Pure NumPy front-to-back splat compositing.

Used when the compiled ``_kernels`` extension is unavailable. Pixel/splat
pairs are expanded up front, grouped per pixel in compositing order, and then
blended one depth layer at a time, so every pixel sees the same sequence of
multiply-adds as in the compiled loop.
"""
from __future__ import annotations

import numpy as np


def _expand_pairs(bbox: np.ndarray, order: np.ndarray, width: int):
    """All (splat, x, y) footprint pairs, splats in compositing order."""
    b = bbox[order]
    nx = b[:, 1] - b[:, 0] + 1
    ny = b[:, 3] - b[:, 2] + 1
    sizes = nx * ny
    total = int(sizes.sum())
    splat = np.repeat(order, sizes)
    start = np.repeat(np.cumsum(sizes) - sizes, sizes)
    local = np.arange(total, dtype=np.int64) - start
    nx_r = np.repeat(nx, sizes)
    x = np.repeat(b[:, 0], sizes) + local % nx_r
    y = np.repeat(b[:, 2], sizes) + local // nx_r
    return splat, x, y


def composite(mean2d, conic, bbox, opacity, feats, order, height, width, record,
              alpha_min, alpha_max, t_min):
    n_pix = height * width
    n_feat = feats.shape[1]
    out = np.zeros((n_pix, n_feat))
    acc = np.zeros(n_pix)
    trans = np.ones(n_pix)
    best = np.zeros(n_pix)
    arg = np.full(n_pix, -1, dtype=np.int64)
    empty = (out, acc, arg, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    if len(order) == 0:
        return empty

    splat, x, y = _expand_pairs(bbox, order, width)
    dx = x - mean2d[splat, 0]
    dy = y - mean2d[splat, 1]
    c = conic[splat]
    power = -0.5 * (c[:, 0] * dx * dx + 2.0 * c[:, 1] * dx * dy + c[:, 2] * dy * dy)
    alpha = opacity[splat] * np.exp(power)
    keep = alpha >= alpha_min
    splat, alpha = splat[keep], np.minimum(alpha[keep], alpha_max)
    pix = (y * width + x)[keep]
    if len(pix) == 0:
        return empty

    # stable grouping keeps the compositing order inside each pixel
    grp = np.argsort(pix, kind="stable")
    pix, splat, alpha = pix[grp], splat[grp], alpha[grp]
    first = np.r_[True, pix[1:] != pix[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(pix)), 0))
    rank = np.arange(len(pix)) - group_start
    by_rank = np.argsort(rank, kind="stable")
    layer_bounds = np.searchsorted(rank[by_rank], np.arange(rank.max() + 2))

    rec_pos, rec_w = [], []
    for r in range(len(layer_bounds) - 1):
        sel = by_rank[layer_bounds[r]:layer_bounds[r + 1]]
        p = pix[sel]
        t = trans[p]
        live = t >= t_min
        if not live.any():
            continue
        sel, p, t = sel[live], p[live], t[live]
        a = alpha[sel]
        w = a * t
        out[p] += w[:, None] * feats[splat[sel]]
        acc[p] += w
        trans[p] = t * (1.0 - a)
        better = w > best[p]
        best[p[better]] = w[better]
        arg[p[better]] = splat[sel][better]
        if record:
            rec_pos.append(sel)
            rec_w.append(w)

    if not record or not rec_pos:
        return out, acc, arg, empty[3], empty[4], empty[5]
    pos = np.concatenate(rec_pos)
    w = np.concatenate(rec_w)
    return out, acc, arg, pix[pos], splat[pos], w
