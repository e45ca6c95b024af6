from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..field import CameraView, GaussianPrimitive, Scene, covariance_of, covariances, quaternion_to_matrix
from . import backend as _backend

NEAR = 0.05
DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
TAU_ALPHA = 0.5
FOOTPRINT_SIGMAS = 3.0
FRUSTUM_MARGIN = 1.3
FLAT_RATIO = 0.5

ALL_CHANNELS = ("color", "normal", "descriptor", "depth")


@dataclass
class ProjectedSplat:
    mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    source: int


@dataclass
class ProjectedField:
    """Screen-space splats of every primitive that survived culling."""

    source: np.ndarray   # (S,) primitive index
    mean2d: np.ndarray   # (S, 2)
    cov2d: np.ndarray    # (S, 2, 2)
    conic: np.ndarray    # (S, 3) packed inverse covariance (a, b, c)
    bbox: np.ndarray     # (S, 4) inclusive x0, x1, y0, y1
    depth: np.ndarray    # (S,)


@dataclass
class RenderedMaps:
    """Per-view blended maps; ``depth`` is NaN where ``acc_alpha <= tau``.

    ``normal`` and ``descriptor`` are unit length on valid pixels;
    ``normal_raw``/``descriptor_raw`` keep the blended sums. ``weights`` is
    the (pixel, source, w) contributor list when it was requested.
    """

    color: np.ndarray
    normal: np.ndarray
    descriptor: np.ndarray
    depth: np.ndarray
    acc_alpha: np.ndarray
    argmax_contributor: np.ndarray
    normal_raw: np.ndarray
    descriptor_raw: np.ndarray
    valid: np.ndarray
    weights: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.acc_alpha.shape


def _jacobians(p_cam: np.ndarray, view: CameraView) -> np.ndarray:
    z = p_cam[:, 2]
    # x/z, y/z clamped to 1.3x the frustum half-extent (3DGS convention)
    lim_x = FRUSTUM_MARGIN * 0.5 * view.width / view.fx
    lim_y = FRUSTUM_MARGIN * 0.5 * view.height / view.fy
    x = np.clip(p_cam[:, 0] / z, -lim_x, lim_x) * z
    y = np.clip(p_cam[:, 1] / z, -lim_y, lim_y) * z
    J = np.zeros((len(p_cam), 2, 3))
    J[:, 0, 0] = view.fx / z
    J[:, 0, 2] = -view.fx * x / (z * z)
    J[:, 1, 1] = view.fy / z
    J[:, 1, 2] = -view.fy * y / (z * z)
    return J


def project_covariances(cov3d: np.ndarray, p_cam: np.ndarray, view: CameraView) -> np.ndarray:
    T = _jacobians(p_cam, view) @ view.rotation
    cov = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov[:, 0, 0] += DILATION
    cov[:, 1, 1] += DILATION
    return cov


def project(prim: GaussianPrimitive, view: CameraView, index: int = 0) -> ProjectedSplat | None:
    """Project a single primitive, or ``None`` if it is behind the near plane."""
    p = view.to_camera(prim.center[None])
    if p[0, 2] <= NEAR:
        return None
    cov = project_covariances(covariance_of(prim)[None], p, view)[0]
    mean = np.array([view.fx * p[0, 0] / p[0, 2] + view.u0, view.fy * p[0, 1] / p[0, 2] + view.v0])
    return ProjectedSplat(mean, cov, float(p[0, 2]), index)


def project_field(scene: Scene, view: CameraView, cov3d: np.ndarray | None = None) -> ProjectedField:
    p = view.to_camera(scene.centers)
    keep = np.flatnonzero(p[:, 2] > NEAR)
    p = p[keep]
    if cov3d is None:
        cov3d = covariances(scene.scales[keep], scene.rotations[keep])
    else:
        cov3d = cov3d[keep]
    cov = project_covariances(cov3d, p, view)
    mean = np.stack([view.fx * p[:, 0] / p[:, 2] + view.u0, view.fy * p[:, 1] / p[:, 2] + view.v0], axis=1)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    r = FOOTPRINT_SIGMAS * np.sqrt(lam)
    x0 = np.maximum(np.ceil(mean[:, 0] - r), 0)
    x1 = np.minimum(np.floor(mean[:, 0] + r), view.width - 1)
    y0 = np.maximum(np.ceil(mean[:, 1] - r), 0)
    y1 = np.minimum(np.floor(mean[:, 1] + r), view.height - 1)
    on_screen = (x0 <= x1) & (y0 <= y1) & np.isfinite(r)
    bbox = np.stack([x0, x1, y0, y1], axis=1)[on_screen].astype(np.int64)
    return ProjectedField(keep[on_screen], mean[on_screen], cov[on_screen], conic[on_screen], bbox,
                          p[on_screen, 2])


def render(scene: Scene, view: CameraView, channels: Iterable[str] = ALL_CHANNELS,
           retain_weights: bool = False, tau_alpha: float = TAU_ALPHA,
           cov3d: np.ndarray | None = None, backend: str | None = None) -> RenderedMaps:
    """Alpha-blend the field into per-pixel maps for one view.

    Channels left out of ``channels`` come back as zero arrays.
    """
    channels = set(channels)
    unknown = channels - set(ALL_CHANNELS)
    if unknown:
        raise ValueError(f"unknown channels {sorted(unknown)}")
    H, W, k = view.height, view.width, scene.descriptor_dim
    if cov3d is None:
        cov3d = scene.covariances()
    proj = project_field(scene, view, cov3d)
    src = proj.source
    want_depth = "depth" in channels
    blocks, layout, col = [], {}, 0
    for name, data in (("color", scene.colors), ("normal", scene.normals), ("descriptor", scene.descriptors)):
        if name not in channels:
            continue
        layout[name] = slice(col, col + data.shape[1])
        col += data.shape[1]
        blocks.append(data[src])
    feats = np.ascontiguousarray(np.concatenate(blocks, axis=1) if blocks else np.zeros((len(src), 0)))
    order = np.lexsort((src, proj.depth)).astype(np.int64)

    out, acc, arg, rp, rs, rw = _backend.composite(
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), proj.bbox,
        np.ascontiguousarray(scene.opacities[src]), feats, order, H, W, bool(retain_weights or want_depth),
        ALPHA_MIN, ALPHA_MAX, T_MIN, backend=backend)

    valid = acc > tau_alpha

    def channel(name, width):
        if name in layout:
            return out[:, layout[name]].copy()
        return np.zeros((H * W, width))

    color = channel("color", 3)
    normal_raw = channel("normal", 3)
    desc_raw = channel("descriptor", k)
    depth = np.full(H * W, np.nan)
    if want_depth:
        z = ray_depths(scene, cov3d, src, view, rp, rs)
        depth_sum = np.bincount(rp, weights=rw * z, minlength=H * W)
        depth[valid] = depth_sum[valid] / acc[valid]

    def unit(raw):
        outv = raw.copy()
        n = np.linalg.norm(raw[valid], axis=1, keepdims=True)
        outv[valid] = raw[valid] / np.maximum(n, 1e-12)
        return outv

    argmax = np.where(arg >= 0, src[np.maximum(arg, 0)], -1) if len(src) else np.full(H * W, -1, dtype=np.int64)
    weights = (rp, src[rs], rw) if retain_weights else None
    return RenderedMaps(
        color=color.reshape(H, W, 3), normal=unit(normal_raw).reshape(H, W, 3),
        descriptor=unit(desc_raw).reshape(H, W, k), depth=depth.reshape(H, W),
        acc_alpha=acc.reshape(H, W), argmax_contributor=argmax.reshape(H, W),
        normal_raw=normal_raw.reshape(H, W, 3), descriptor_raw=desc_raw.reshape(H, W, k),
        valid=valid.reshape(H, W), weights=weights)


def ray_depths(scene: Scene, cov3d: np.ndarray, src: np.ndarray, view: CameraView,
               pix: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Camera depth at which each contributing pixel ray meets its splat.

    Flat splats (shortest axis at most FLAT_RATIO of the middle one) use the
    tangent plane through the centre, normal to the shortest axis, so coplanar
    splats agree exactly on the depth of their common plane. Other splats use
    the density peak along the ray, t = r^T P p / r^T P r with P the
    camera-frame inverse covariance, clamped to 3 sigma around the centre
    depth. Every depth is kept beyond the near plane.
    """
    if len(pix) == 0:
        return np.zeros(0)
    R = view.rotation
    pc = view.to_camera(scene.centers[src])
    x = (pix % view.width - view.u0) / view.fx
    y = (pix // view.width - view.v0) / view.fy

    # per-splat quantities first; per-contributor work is gathers and scalar ops
    scales = scene.scales[src]
    srt = np.sort(scales, axis=1)
    axis = np.argmin(scales, axis=1)
    rot = quaternion_to_matrix(scene.rotations[src])
    n_s = (R @ rot[np.arange(len(src)), :, axis][..., None])[..., 0]
    d_s = n_s[:, 0] * pc[:, 0] + n_s[:, 1] * pc[:, 1] + n_s[:, 2] * pc[:, 2]
    flat_s = srt[:, 0] <= FLAT_RATIO * srt[:, 1]

    nr = n_s[local, 0] * x + n_s[local, 1] * y + n_s[local, 2]
    ok = flat_s[local] & (np.abs(nr) > 1e-12)
    z = d_s[local] / np.where(ok, nr, 1.0)
    rest = np.flatnonzero(~ok)
    if len(rest):
        need, inv_idx = np.unique(local[rest], return_inverse=True)
        P = R @ np.linalg.inv(cov3d[src[need]]) @ R.T
        a = np.einsum("nij,nj->ni", P, pc[need])
        a, P = a[inv_idx], P[inv_idx]
        xr, yr = x[rest], y[rest]
        num = a[:, 0] * xr + a[:, 1] * yr + a[:, 2]
        den = (P[:, 0, 0] * xr * xr + 2.0 * P[:, 0, 1] * xr * yr + P[:, 1, 1] * yr * yr
               + 2.0 * P[:, 0, 2] * xr + 2.0 * P[:, 1, 2] * yr + P[:, 2, 2])
        z[rest] = num / den

    # the tangent plane is the splat's surface wherever it is drawn
    zc = pc[local, 2]
    reach = np.where(ok, np.inf, FOOTPRINT_SIGMAS * srt[local, 2])
    return np.clip(z, np.maximum(zc - reach, NEAR), zc + reach)


def blend_features(features: np.ndarray, weights, n_pixels: int) -> np.ndarray:
    """Re-blend per-primitive ``features`` with recorded contributor weights."""
    pix, src, w = weights
    out = np.zeros((n_pixels, features.shape[1]))
    for j in range(features.shape[1]):
        out[:, j] = np.bincount(pix, weights=w * features[src, j], minlength=n_pixels)
    return out


def splat_transpose(pixel_grad: np.ndarray, weights, n_primitives: int) -> np.ndarray:
    """Adjoint of blending: per-primitive sum of w * (per-pixel gradient)."""
    pix, src, w = weights
    out = np.zeros((n_primitives, pixel_grad.shape[1]))
    for j in range(pixel_grad.shape[1]):
        out[:, j] = np.bincount(src, weights=w * pixel_grad[pix, j], minlength=n_primitives)
    return out
