"""Synthetic planar rooms with ground truth, camera orbits and SAM-like masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .field import CameraView, GtPlane, Scene, matrix_to_quaternion, normalize_rows, random_unit_vectors
from .render import RenderedMaps, render


class SynthConfigError(ValueError):
    pass


@dataclass
class RectSpec:
    """Rectangle ``center + s*axis_u + t*axis_v`` with |s| <= half_u, |t| <= half_v.

    The plane normal is ``axis_u x axis_v``.
    """

    center: tuple[float, float, float]
    axis_u: tuple[float, float, float]
    axis_v: tuple[float, float, float]
    half_u: float
    half_v: float


def _tilted(center, yaw_deg, pitch_deg, half_u, half_v) -> RectSpec:
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    u = (math.cos(yaw), math.sin(yaw), 0.0)
    v = (-math.sin(yaw) * math.cos(pitch), math.cos(yaw) * math.cos(pitch), math.sin(pitch))
    return RectSpec(center, u, v, half_u, half_v)


def default_tilted() -> list[RectSpec]:
    return [
        _tilted((1.1, 2.45, 0.75), 10.0, 35.0, 0.6, 0.45),
        _tilted((2.9, 1.0, 1.45), -35.0, 65.0, 0.5, 0.4),
    ]


@dataclass
class MaskConfig:
    split_rate: float = 2.0          # lambda_split: extra Voronoi cells per plane region
    jitter: bool = True
    jitter_px: tuple[int, int] = (1, 2)
    flip_prob: float = 0.5
    min_pixels: int = 30
    edge_radius: int = 2
    supervision_noise: float = 0.05  # radians, per-pixel normal noise


@dataclass
class SynthConfig:
    room: tuple[float, float, float] = (4.0, 3.5, 2.5)
    tilted: list[RectSpec] = field(default_factory=default_tilted)
    include_box: bool = True
    gaussians_per_m2: float = 750.0
    position_noise: float = 0.01
    normal_noise: float = 0.05
    opacity: float = 0.9
    scale_factor: float = 0.9        # tangential scale / nominal spacing
    normal_scale: float = 0.002
    n_views: int = 40
    image_size: int = 128
    focal: float = 70.0
    orbit_radius: float = 0.9
    descriptor_dim: int = 3
    seed: int = 0
    masks: MaskConfig = field(default_factory=MaskConfig)

    def validate(self) -> None:
        if self.gaussians_per_m2 <= 0:
            raise SynthConfigError("gaussians_per_m2 must be positive")
        if self.position_noise < 0 or self.normal_noise < 0:
            raise SynthConfigError("noise levels must be non-negative")
        if self.n_views < 3:
            raise SynthConfigError("need at least 3 views")
        if self.image_size < 8:
            raise SynthConfigError("image_size too small")


def box_rects(room) -> list[RectSpec]:
    """Floor, ceiling and four walls with normals pointing into the room."""
    lx, ly, lz = room
    cx, cy, cz = lx / 2, ly / 2, lz / 2
    return [
        RectSpec((cx, cy, 0.0), (1, 0, 0), (0, 1, 0), cx, cy),
        RectSpec((cx, cy, lz), (0, 1, 0), (1, 0, 0), cy, cx),
        RectSpec((0.0, cy, cz), (0, 1, 0), (0, 0, 1), cy, cz),
        RectSpec((lx, cy, cz), (0, 0, 1), (0, 1, 0), cz, cy),
        RectSpec((cx, 0.0, cz), (0, 0, 1), (1, 0, 0), cz, cx),
        RectSpec((cx, ly, cz), (1, 0, 0), (0, 0, 1), cx, cz),
    ]


def _rect_frame(spec: RectSpec):
    u = np.asarray(spec.axis_u, dtype=np.float64)
    v = np.asarray(spec.axis_v, dtype=np.float64)
    u /= np.linalg.norm(u)
    v = v - (v @ u) * u
    nv = np.linalg.norm(v)
    area = 4.0 * spec.half_u * spec.half_v * (nv > 1e-12)
    if area <= 0:
        raise SynthConfigError(f"degenerate rectangle at {spec.center}")
    v /= nv
    return np.asarray(spec.center, dtype=np.float64), u, v, np.cross(u, v), area


def _perturb_normals(rng, n: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return n.copy()
    g = rng.standard_normal(n.shape) * sigma
    g -= (g * n).sum(axis=-1, keepdims=True) * n
    return normalize_rows(n + g)


def orbit_views(cfg: SynthConfig, rng: np.random.Generator) -> list[CameraView]:
    lx, ly, lz = cfg.room
    centre = np.array([lx / 2, ly / 2, lz / 2])
    views = []
    for i in range(cfg.n_views):
        theta = 2 * math.pi * (i + rng.uniform(-0.3, 0.3)) / cfg.n_views
        radial = np.array([math.cos(theta), math.sin(theta), 0.0])
        eye = centre + cfg.orbit_radius * radial
        eye[2] = rng.uniform(0.35, 0.65) * lz
        target = centre - 1.5 * radial
        # alternate pitch so floor and ceiling both get coverage
        target[2] = lz * (0.15 if i % 3 == 0 else 0.85 if i % 3 == 1 else 0.5) + rng.uniform(-0.1, 0.1)
        views.append(CameraView.look_at(eye, target, cfg.focal, cfg.focal, cfg.image_size, cfg.image_size))
    return views


def generate_scene(cfg: SynthConfig) -> Scene:
    """Sample a noisy Gaussian field over the configured planes plus cameras."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    rects = (box_rects(cfg.room) if cfg.include_box else []) + list(cfg.tilted)
    if not rects:
        raise SynthConfigError("no planes configured")
    spacing = 1.0 / math.sqrt(cfg.gaussians_per_m2)
    blocks = {k: [] for k in ("centers", "scales", "rotations", "colors", "normals", "ids")}
    gt = []
    for pid, spec in enumerate(rects):
        c, u, v, n, area = _rect_frame(spec)
        count = int(rng.poisson(cfg.gaussians_per_m2 * area))
        s = rng.uniform(-spec.half_u, spec.half_u, count)
        t = rng.uniform(-spec.half_v, spec.half_v, count)
        pts = c + s[:, None] * u + t[:, None] * v
        pts += rng.standard_normal(pts.shape) * cfg.position_noise
        quat = matrix_to_quaternion(np.stack([u, v, n], axis=1))
        base = rng.uniform(0.2, 0.9, 3)
        blocks["centers"].append(pts)
        blocks["scales"].append(np.tile([cfg.scale_factor * spacing, cfg.scale_factor * spacing,
                                         cfg.normal_scale], (count, 1)))
        blocks["rotations"].append(np.tile(quat, (count, 1)))
        blocks["colors"].append(np.clip(base + rng.normal(0, 0.03, (count, 3)), 0, 1))
        blocks["normals"].append(_perturb_normals(rng, np.tile(n, (count, 1)), cfg.normal_noise))
        blocks["ids"].append(np.full(count, pid, dtype=np.int64))
        corners = [c + a * spec.half_u * u + b * spec.half_v * v for a, b in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
        gt.append(GtPlane(pid, n, -float(n @ c), np.array(corners)))
    n_total = sum(len(b) for b in blocks["ids"])
    descriptors = random_unit_vectors(rng, n_total, cfg.descriptor_dim)
    scene = Scene(np.concatenate(blocks["centers"]), np.concatenate(blocks["scales"]),
                  np.concatenate(blocks["rotations"]), np.full(n_total, cfg.opacity),
                  np.concatenate(blocks["colors"]), np.concatenate(blocks["normals"]), descriptors,
                  np.concatenate(blocks["ids"]), [], gt)

    cov3d = scene.covariances()
    for attempt in range(20):
        cam_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, attempt]))
        views = orbit_views(cfg, cam_rng)
        if _coverage_ok(scene, views, cov3d, cfg.masks.min_pixels, len(rects)):
            break
    else:
        raise SynthConfigError("could not place cameras seeing every plane in >= 3 views")
    scene.views = views
    return scene


def true_plane_map(scene: Scene, maps: RenderedMaps) -> np.ndarray:
    """Ground-truth plane id per pixel from the argmax contributor (-1 = none)."""
    arg = maps.argmax_contributor
    ids = np.full(arg.shape, -1, dtype=np.int64)
    ids[arg >= 0] = scene.plane_ids[arg[arg >= 0]]
    return np.where(maps.valid, ids, -1)


def _coverage_ok(scene, views, cov3d, min_pixels, n_planes) -> bool:
    seen = np.zeros(n_planes, dtype=int)
    for view in views:
        ids = true_plane_map(scene, render(scene, view, channels=(), cov3d=cov3d))
        counts = np.bincount(ids[ids >= 0], minlength=n_planes)
        seen += counts >= min_pixels
    return bool((seen >= 3).all())


def view_rng(seed: int, view_index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, view_index, purpose]))


def _jitter(labels: np.ndarray, valid: np.ndarray, rng, passes: int, prob: float) -> np.ndarray:
    out = labels.copy()
    H, W = labels.shape
    for _ in range(passes):
        direction = rng.integers(0, 4, size=labels.shape)
        dy = np.array([-1, 1, 0, 0])[direction]
        dx = np.array([0, 0, -1, 1])[direction]
        yy = np.clip(np.arange(H)[:, None] + dy, 0, H - 1)
        xx = np.clip(np.arange(W)[None, :] + dx, 0, W - 1)
        neighbour = out[yy, xx]
        flip = valid & valid[yy, xx] & (neighbour != out) & (rng.random(labels.shape) < prob)
        out = np.where(flip, neighbour, out)
    return out


def simulate_masks(scene: Scene, view: CameraView, cfg: MaskConfig, rng: np.random.Generator,
                   maps: RenderedMaps | None = None) -> np.ndarray:
    """SAM-like over-segmentation of one view; 0 = invalid, segments 1..m."""
    if maps is None:
        maps = render(scene, view, channels=())
    true = true_plane_map(scene, maps)
    H, W = true.shape
    labels = np.zeros((H, W), dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]
    next_id = 1
    for pid in np.unique(true[true >= 0]):
        region = true == pid
        py, px = yy[region], xx[region]
        n_cells = 1 + int(rng.poisson(cfg.split_rate))
        pick = rng.choice(len(py), size=min(n_cells, len(py)), replace=False)
        d2 = (py[:, None] - py[pick][None]) ** 2 + (px[:, None] - px[pick][None]) ** 2
        cell = np.argmin(d2, axis=1)
        cells = np.zeros((H, W), dtype=np.int64)
        cells[py, px] = cell + 1
        for c in range(1, len(pick) + 1):
            comp, n_comp = ndimage.label(cells == c)
            labels[comp > 0] = comp[comp > 0] + next_id - 1
            next_id += n_comp
    valid = true >= 0
    if cfg.jitter:
        passes = int(rng.integers(cfg.jitter_px[0], cfg.jitter_px[1] + 1))
        labels = _jitter(labels, valid, rng, passes, cfg.flip_prob)
    if cfg.edge_radius > 0:
        r = cfg.edge_radius
        disc = (np.add.outer(np.arange(-r, r + 1) ** 2, np.arange(-r, r + 1) ** 2) <= r * r)
        hi = ndimage.maximum_filter(true, footprint=disc, mode="nearest")
        lo = ndimage.minimum_filter(true, footprint=disc, mode="nearest")
        valid &= hi == lo
    labels[~valid] = 0
    return relabel(labels, cfg.min_pixels, rng)


def relabel(labels: np.ndarray, min_pixels: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """Drop segments below ``min_pixels`` and re-densify ids to 1..m.

    With ``rng`` the new ids are a random permutation, otherwise they follow
    the order of the old ids.
    """
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    kept = np.flatnonzero(counts >= min_pixels)
    new_ids = np.arange(1, len(kept) + 1)
    if rng is not None:
        new_ids = rng.permutation(new_ids)
    lut = np.zeros(len(counts), dtype=np.int64)
    lut[kept] = new_ids
    return lut[labels]


def simulate_normal_map(scene: Scene, maps: RenderedMaps, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Supervision normals: true plane normal per pixel plus angular noise; NaN off-surface."""
    true = true_plane_map(scene, maps)
    normals = np.array([p.normal for p in scene.gt_planes])
    out = np.full(true.shape + (3,), np.nan)
    on = true >= 0
    out[on] = _perturb_normals(rng, normals[true[on]], noise)
    return out
