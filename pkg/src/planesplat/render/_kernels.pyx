# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back splat compositing.

Same contract as :func:`planesplat.render._fallback.composite`.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def composite(const double[:, ::1] mean2d, const double[:, ::1] conic, const cnp.int64_t[:, ::1] bbox,
              const double[::1] opacity, const double[:, ::1] feats, const cnp.int64_t[::1] order,
              int height, int width, bint record, double alpha_min, double alpha_max, double t_min):
    cdef Py_ssize_t n_pix = <Py_ssize_t>height * width
    cdef Py_ssize_t n_feat = feats.shape[1]
    cdef Py_ssize_t n_splat = order.shape[0]
    cdef Py_ssize_t capacity = 0
    cdef Py_ssize_t s, i, x, y, p, f, count = 0
    cdef double dx, dy, power, alpha, w, t

    if record:
        for s in range(n_splat):
            i = order[s]
            capacity += (bbox[i, 1] - bbox[i, 0] + 1) * (bbox[i, 3] - bbox[i, 2] + 1)

    out_np = np.zeros((n_pix, n_feat), dtype=np.float64)
    acc_np = np.zeros(n_pix, dtype=np.float64)
    trans_np = np.ones(n_pix, dtype=np.float64)
    best_np = np.zeros(n_pix, dtype=np.float64)
    arg_np = np.full(n_pix, -1, dtype=np.int64)
    pix_np = np.empty(capacity, dtype=np.int64)
    src_np = np.empty(capacity, dtype=np.int64)
    wt_np = np.empty(capacity, dtype=np.float64)

    cdef double[:, ::1] out = out_np
    cdef double[::1] acc = acc_np
    cdef double[::1] trans = trans_np
    cdef double[::1] best = best_np
    cdef cnp.int64_t[::1] arg = arg_np
    cdef cnp.int64_t[::1] rec_pix = pix_np
    cdef cnp.int64_t[::1] rec_src = src_np
    cdef double[::1] rec_w = wt_np

    with nogil:
        for s in range(n_splat):
            i = order[s]
            for y in range(bbox[i, 2], bbox[i, 3] + 1):
                dy = y - mean2d[i, 1]
                for x in range(bbox[i, 0], bbox[i, 1] + 1):
                    p = y * width + x
                    t = trans[p]
                    if t < t_min:
                        continue
                    dx = x - mean2d[i, 0]
                    power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy)
                    alpha = opacity[i] * exp(power)
                    if alpha < alpha_min:
                        continue
                    if alpha > alpha_max:
                        alpha = alpha_max
                    w = alpha * t
                    for f in range(n_feat):
                        out[p, f] += w * feats[i, f]
                    acc[p] += w
                    trans[p] = t * (1.0 - alpha)
                    if w > best[p]:
                        best[p] = w
                        arg[p] = i
                    if record:
                        rec_pix[count] = p
                        rec_src[count] = i
                        rec_w[count] = w
                        count += 1

    return out_np, acc_np, arg_np, pix_np[:count], src_np[:count], wt_np[:count]
