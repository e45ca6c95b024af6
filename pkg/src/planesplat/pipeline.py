"""Pipeline stages: supervision, descriptor/normal optimisation, plane parsing, evaluation."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry, gmt, learn, metrics, segfusion, synth
from .config import PipelineConfig
from .field import CameraView, Scene
from .render import render

log = logging.getLogger(__name__)


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map; results never depend on the worker count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class Supervision:
    masks: list[np.ndarray]                   # raw segment maps, 0 = invalid
    normals: list[np.ndarray] | None = None   # (H, W, 3) world normals, NaN = unknown
    references: list[np.ndarray] | None = None  # reference colour images for L_rgb


def simulate_supervision(scene: Scene, cfg: PipelineConfig, threads: int = 1) -> Supervision:
    """Masks, supervision normals and reference images for every view of a synthetic scene."""
    mcfg = cfg.synth.masks
    cov3d = scene.covariances()

    def one(i):
        view = scene.views[i]
        maps = render(scene, view, channels=("color",), cov3d=cov3d)
        mask = synth.simulate_masks(scene, view, mcfg, synth.view_rng(cfg.seed, i, 0), maps=maps)
        normal = synth.simulate_normal_map(scene, maps, mcfg.supervision_noise, synth.view_rng(cfg.seed, i, 1))
        return mask, normal, maps.color

    out = _map(one, list(range(len(scene.views))), threads)
    return Supervision([o[0] for o in out], [o[1] for o in out], [o[2] for o in out])


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["iteration,L_seg,L_n,L_rgb"]
        lines += [f"{it},{a!r},{b!r},{c!r}" for it, a, b, c in self.rows]
        return "\n".join(lines) + "\n"


def merged_labels(scene_view_maps, mask: np.ndarray, view: CameraView, cfg: PipelineConfig) -> np.ndarray:
    sf = cfg.segfusion
    return segfusion.merge_segments(mask, scene_view_maps.depth, scene_view_maps.normal, view,
                                    math.radians(sf.theta_n_deg), sf.theta_d, math.radians(sf.v_max_deg))


def optimize(scene: Scene, sup: Supervision, cfg: PipelineConfig,
             progress: Callable[[int], None] | None = None) -> tuple[Scene, TrainLog]:
    """Train descriptors and normals with geometry frozen except for planar alignment."""
    scene = scene.copy()
    lc, gc, ab = cfg.learn, cfg.geometry, cfg.ablation
    ms = lc.mean_shift
    views = scene.views
    cov3d = scene.covariances()
    knn = geometry.build_knn(scene.centers, gc.k)
    ms_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    trace = TrainLog()
    order: np.ndarray = np.zeros(0, dtype=np.int64)
    for it in range(1, cfg.iterations + 1):
        pos = (it - 1) % len(views)
        if pos == 0:
            epoch = (it - 1) // len(views)
            order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, epoch])).permutation(len(views))
        v = int(order[pos])
        view = views[v]
        maps = render(scene, view, retain_weights=True, tau_alpha=cfg.render.tau_alpha, cov3d=cov3d)

        l_n = 0.0
        new_normals = scene.normals
        if sup.normals is not None:
            l_n, new_normals = learn.normal_loss_step(scene, maps, sup.normals[v], lc.normal_lr)

        l_seg = 0.0
        new_desc = scene.descriptors
        if ab.masks:
            merged = merged_labels(maps, sup.masks[v], view, cfg)
            Y, pix = segfusion.one_hot_targets(merged)
            if len(pix):
                keep = maps.valid.ravel()[pix]
                Y, pix = Y[keep], pix[keep]
                Y = Y[:, Y.sum(axis=0) > 0]
            if len(pix) and Y.shape[1] >= 1:
                Z = maps.descriptor.reshape(-1, scene.descriptor_dim)[pix]
                solve = learn.solve_regression(Z, Y, lc.ridge)
                l_seg = solve.loss
                new_desc = learn.descriptor_gradient_step(scene, maps, pix, solve, lc.lr)

        l_rgb = learn.photometric_loss(maps, sup.references[v]) if sup.references is not None else 0.0
        scene.normals = new_normals
        scene.descriptors = new_desc

        if ab.mean_shift and it >= ms.warmup and (it - ms.warmup) % ms.period == 0:
            scene.descriptors = learn.mean_shift_sampled(scene.descriptors, knn.neighbors, ms, ms_rng)
        if ab.align and gc.align_period > 0 and it % gc.align_period == 0:
            scene.centers = geometry.planar_align(scene.centers, knn)
            knn = geometry.build_knn(scene.centers, gc.k, built_at=it)
        if ab.smooth and gc.smooth_period > 0 and it % gc.smooth_period == 0:
            scene.normals = geometry.laplacian_smooth(scene.normals, knn)
            scene.descriptors = geometry.laplacian_smooth(scene.descriptors, knn)
        trace.rows.append((it, l_seg, l_n, l_rgb))
        if progress is not None:
            progress(it)
    return scene, trace


@dataclass
class ParseResult:
    planes: gmt.PlaneSet
    leaves: list[gmt.GaussianNode]
    labels: np.ndarray


def parse_planes(scene: Scene, masks: Sequence[np.ndarray], cfg: PipelineConfig, threads: int = 1) -> ParseResult:
    """Leaves from every view, greedy tree, per-primitive labels and plane fits."""
    cov3d = scene.covariances()
    g = cfg.gmt

    def one(i):
        view = scene.views[i]
        maps = render(scene, view, channels=("normal", "descriptor", "depth"),
                      tau_alpha=cfg.render.tau_alpha, cov3d=cov3d)
        merged = merged_labels(maps, masks[i], view, cfg)
        return gmt.leaves_for_view(view, merged, maps, i, g.p_min)

    leaves = [leaf for chunk in _map(one, list(range(len(scene.views))), threads) for leaf in chunk]
    planes = gmt.build_tree(leaves, g.eps_b, g.eps_z, g.leaf_order, cfg.seed, g.min_views)
    labels = gmt.assign_primitives(scene, planes, g.theta_assign, g.r_min)
    planes.params = gmt.fit_plane_params(scene.centers, scene.normals, labels, len(planes))
    return ParseResult(planes, leaves, labels)


def gt_surface_samples(scene: Scene, spacing: float) -> np.ndarray:
    if not scene.gt_planes:
        return np.zeros((0, 3))
    return np.concatenate([metrics.sample_polygon(p.polygon, spacing) for p in scene.gt_planes])


def evaluate(scene: Scene, labels: np.ndarray, params, cfg: PipelineConfig) -> dict:
    gt = scene.plane_ids
    acc = comp = None
    pred_pts = gmt.project_to_planes(scene.centers, labels, params)
    gt_pts = gt_surface_samples(scene, cfg.eval.gt_spacing)
    if len(pred_pts) and len(gt_pts):
        acc, comp = metrics.accuracy_completeness(pred_pts, gt_pts)
    n_gt = len(scene.gt_planes) if scene.gt_planes else None
    return metrics.report(gt, labels, acc, comp, n_gt, cfg.eval.unassigned)


@dataclass
class RunResult:
    scene: Scene
    trained: Scene
    supervision: Supervision
    trace: TrainLog
    parse: ParseResult
    metrics: dict
    timings: dict


def run(cfg: PipelineConfig, threads: int = 1, scene: Scene | None = None,
        supervision: Supervision | None = None) -> RunResult:
    """Synthesise (unless given), optimise, parse planes and evaluate."""
    t = {}
    t0 = time.perf_counter()
    if scene is None:
        scene = synth.generate_scene(cfg.synth)
    t["synth"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if supervision is None:
        supervision = simulate_supervision(scene, cfg, threads)
    t["supervision"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    trained, trace = optimize(scene, supervision, cfg)
    t["optimize"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    parsed = parse_planes(trained, supervision.masks, cfg, threads)
    t["parse"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    report = evaluate(trained, parsed.labels, parsed.planes.params, cfg)
    t["eval"] = time.perf_counter() - t0
    log.info("timings %s", {k: round(v, 2) for k, v in t.items()})
    return RunResult(scene, trained, supervision, trace, parsed, report, t)
