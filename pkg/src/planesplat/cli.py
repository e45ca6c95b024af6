"""Command-line entry point: one subcommand per stage plus ``pipeline``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gmt, metrics, pipeline, synth
from .config import ConfigError, PipelineConfig, load_config
from .field import (Scene, load_cameras, load_field, load_gt_planes, save_cameras, save_field,
                    save_gt_planes)
from .imageio import read_pfm, read_pgm16, write_pfm, write_pgm16
from .render import render

log = logging.getLogger("planesplat")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class Manifest:
    """Artifacts written under one output directory, with content hashes."""

    def __init__(self, root: Path):
        self.root = root
        self.path = root / "manifest.json"
        self.entries: dict[str, dict] = {}
        if self.path.exists():
            for e in json.loads(self.path.read_text()).get("artifacts", []):
                self.entries[e["path"]] = e

    def add(self, stage: str, path: Path) -> None:
        rel = path.relative_to(self.root).as_posix()
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.entries[rel] = {"stage": stage, "path": rel, "sha256": digest}

    def save(self) -> None:
        items = sorted(self.entries.values(), key=lambda e: e["path"])
        self.path.write_text(json.dumps({"artifacts": items}, indent=1) + "\n")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _config(args) -> PipelineConfig:
    overrides = {"seed": args.seed} if getattr(args, "seed", None) is not None else None
    return load_config(args.config, overrides)


def _load_scene_dir(directory: Path, cfg: PipelineConfig, name: str = "field.ply") -> Scene:
    path = directory / name
    if not path.exists():
        raise FileNotFoundError(f"missing input file {path}")
    scene = load_field(path, seed=cfg.seed, descriptor_dim=cfg.synth.descriptor_dim)
    cams = directory / "cameras.json"
    if not cams.exists():
        raise FileNotFoundError(f"missing input file {cams}")
    scene.views = load_cameras(cams)
    gt = directory / "gt_planes.json"
    if gt.exists():
        scene.gt_planes = load_gt_planes(gt)
    return scene


def _load_masks(directory: Path, n_views: int) -> list[np.ndarray]:
    out = []
    for i in range(n_views):
        p = directory / f"view_{i}.pgm"
        if not p.exists():
            raise FileNotFoundError(f"missing mask {p}")
        out.append(read_pgm16(p).astype(np.int64))
    return out


def _load_normals(directory: Path | None, n_views: int) -> list[np.ndarray] | None:
    if directory is None:
        return None
    out = []
    for i in range(n_views):
        p = directory / f"view_{i}.pfm"
        if not p.exists():
            raise FileNotFoundError(f"missing normal map {p}")
        out.append(read_pfm(p))
    return out


def _write_scene(out: Path, scene: Scene, manifest: Manifest, stage: str, name: str = "field.ply") -> None:
    save_field(scene, out / name)
    save_cameras(scene.views, out / "cameras.json")
    manifest.add(stage, out / name)
    manifest.add(stage, out / "cameras.json")
    if scene.gt_planes:
        save_gt_planes(scene.gt_planes, out / "gt_planes.json")
        manifest.add(stage, out / "gt_planes.json")


def _write_supervision(out: Path, sup: pipeline.Supervision, manifest: Manifest, stage: str) -> None:
    (out / "masks").mkdir(exist_ok=True)
    (out / "normals").mkdir(exist_ok=True)
    for i, mask in enumerate(sup.masks):
        p = out / "masks" / f"view_{i}.pgm"
        write_pgm16(p, mask)
        manifest.add(stage, p)
    for i, nmap in enumerate(sup.normals or []):
        p = out / "normals" / f"view_{i}.pfm"
        write_pfm(p, nmap)
        manifest.add(stage, p)


def _references(scene: Scene, threads: int) -> list[np.ndarray]:
    cov3d = scene.covariances()
    return pipeline._map(lambda v: render(scene, v, channels=("color",), cov3d=cov3d).color,
                         scene.views, threads)


# --------------------------------------------------------------------------- stages

def cmd_synth(args, manifest: Manifest) -> dict:
    cfg = _config(args)
    scene = synth.generate_scene(cfg.synth)
    sup = pipeline.simulate_supervision(scene, cfg, args.threads)
    _write_scene(args.out, scene, manifest, "synth")
    _write_supervision(args.out, sup, manifest, "synth")
    _dump_json(args.out / "config.resolved.json", cfg.to_dict())
    manifest.add("synth", args.out / "config.resolved.json")
    return {"primitives": len(scene), "views": len(scene.views)}


def cmd_render(args, manifest: Manifest) -> dict:
    cfg = _config(args)
    scene = _load_scene_dir(args.scene, cfg, args.field_name)
    ids = range(len(scene.views)) if args.views is None else [int(v) for v in args.views.split(",")]
    cov3d = scene.covariances()
    root = args.out / "renders"
    root.mkdir(exist_ok=True)
    for i in ids:
        if not 0 <= i < len(scene.views):
            raise ValueError(f"view index {i} out of range 0..{len(scene.views) - 1}")
        maps = render(scene, scene.views[i], tau_alpha=cfg.render.tau_alpha, cov3d=cov3d)
        outputs = {"color": maps.color, "normal": maps.normal, "descriptor": maps.descriptor[..., :3],
                   "depth": maps.depth, "alpha": maps.acc_alpha}
        for name, img in outputs.items():
            p = root / f"{name}_{i}.pfm"
            write_pfm(p, img)
            manifest.add("render", p)
        p = root / f"contributor_{i}.pgm"
        write_pgm16(p, np.clip(maps.argmax_contributor + 1, 0, 65535))
        manifest.add("render", p)
    return {"views": len(list(ids))}


def cmd_optimize(args, manifest: Manifest) -> dict:
    cfg = _config(args)
    scene = _load_scene_dir(args.scene, cfg)
    masks = _load_masks(args.masks or args.scene / "masks", len(scene.views))
    normals_dir = args.normals or (args.scene / "normals" if (args.scene / "normals").exists() else None)
    sup = pipeline.Supervision(masks, _load_normals(normals_dir, len(scene.views)), _references(scene, args.threads))
    trained, trace = pipeline.optimize(scene, sup, cfg)
    _write_scene(args.out, trained, manifest, "optimize", "trained.ply")
    (args.out / "losses.csv").write_text(trace.to_csv())
    manifest.add("optimize", args.out / "losses.csv")
    return {"iterations": cfg.iterations, "final": list(trace.rows[-1]) if trace.rows else None}


def _write_parse(out: Path, scene: Scene, parsed: pipeline.ParseResult, manifest: Manifest, stage: str) -> None:
    gmt.save_labels_ply(out / "labels.ply", scene.centers, parsed.labels)
    gmt.save_plane_set(parsed.planes, out / "planes.json", "labels.ply")
    manifest.add(stage, out / "labels.ply")
    manifest.add(stage, out / "planes.json")


def cmd_parse_planes(args, manifest: Manifest) -> dict:
    cfg = _config(args)
    scene = _load_scene_dir(args.scene, cfg, args.field_name)
    masks = _load_masks(args.masks or args.scene / "masks", len(scene.views))
    parsed = pipeline.parse_planes(scene, masks, cfg, args.threads)
    _write_parse(args.out, scene, parsed, manifest, "parse-planes")
    return {"planes": len(parsed.planes), "rejected": len(parsed.planes.rejected)}


def _read_labels(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Points and labels from a field PLY (``plane_id``) or a labels PLY (``label``)."""
    if not path.exists():
        raise FileNotFoundError(f"missing input file {path}")
    data = path.read_bytes()
    marker = b"end_header\n"
    if marker not in data:
        raise ValueError(f"{path}: not a PLY file")
    end = data.index(marker) + len(marker)
    header = data[:end].decode("ascii").splitlines()
    props = [h.split() for h in header if h.startswith("property")]
    if any(p[2] == "plane_id" for p in props):
        scene = load_field(path)
        return scene.centers, scene.plane_ids
    if not any(p[2] == "label" for p in props) or "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: expected a binary PLY with a 'label' or 'plane_id' property")
    n = next(int(h.split()[2]) for h in header if h.startswith("element vertex"))
    kinds = {"double": "<f8", "float": "<f4", "uchar": "u1", "int": "<i4"}
    rec = np.frombuffer(data, dtype=np.dtype([(p[2], kinds[p[1]]) for p in props]), count=n, offset=end)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return pts, rec["label"].astype(np.int64)


def cmd_eval(args, manifest: Manifest) -> dict:
    cfg = _config(args)
    pts, pred = _read_labels(args.labels)
    _, gt = _read_labels(args.gt)
    if len(gt) != len(pred):
        raise ValueError(f"label counts differ: {len(gt)} ground truth vs {len(pred)} predicted")
    acc = comp = None
    n_gt = None
    if args.gt_planes is not None:
        planes = load_gt_planes(args.gt_planes)
        n_gt = len(planes)
        params = gmt.fit_plane_params(pts, np.zeros_like(pts), pred, int(pred.max(initial=-1)) + 1)
        pred_pts = gmt.project_to_planes(pts, pred, params)
        gt_pts = np.concatenate([metrics.sample_polygon(p.polygon, cfg.eval.gt_spacing) for p in planes])
        if len(pred_pts):
            acc, comp = metrics.accuracy_completeness(pred_pts, gt_pts)
    report = metrics.report(gt, pred, acc, comp, n_gt, cfg.eval.unassigned)
    _dump_json(args.out / "metrics.json", report)
    manifest.add("eval", args.out / "metrics.json")
    return report


def cmd_pipeline(args, manifest: Manifest) -> dict:
    cfg = _config(args)
    out = args.out
    _dump_json(out / "config.resolved.json", cfg.to_dict())
    manifest.add("pipeline", out / "config.resolved.json")
    stage = "synth"
    try:
        scene = synth.generate_scene(cfg.synth)
        sim = pipeline.simulate_supervision(scene, cfg, args.threads) if args.masks is None else None
        masks = sim.masks if sim is not None else _load_masks(args.masks, len(scene.views))
        if args.normals is not None:
            normals = _load_normals(args.normals, len(scene.views))
        else:
            normals = sim.normals if sim is not None else None
        sup = pipeline.Supervision(masks, normals, [])
        _write_scene(out, scene, manifest, stage)
        _write_supervision(out, sup, manifest, stage)
        # later stages read what earlier ones wrote, so each stage can be rerun from disk
        scene = _load_scene_dir(out, cfg)
        sup = pipeline.Supervision(_load_masks(out / "masks", len(scene.views)),
                                   _load_normals(out / "normals" if sup.normals else None, len(scene.views)),
                                   _references(scene, args.threads))
        stage = "optimize"
        trained, trace = pipeline.optimize(scene, sup, cfg)
        _write_scene(out, trained, manifest, stage, "trained.ply")
        (out / "losses.csv").write_text(trace.to_csv())
        manifest.add(stage, out / "losses.csv")
        stage = "parse-planes"
        trained = _load_scene_dir(out, cfg, "trained.ply")
        parsed = pipeline.parse_planes(trained, sup.masks, cfg, args.threads)
        _write_parse(out, trained, parsed, manifest, stage)
        stage = "eval"
        report = pipeline.evaluate(trained, parsed.labels, parsed.planes.params, cfg)
        _dump_json(out / "metrics.json", report)
        manifest.add(stage, out / "metrics.json")
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    return report


COMMANDS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "optimize": cmd_optimize,
    "parse-planes": cmd_parse_planes,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planesplat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scene=False):
        p.add_argument("--config", type=Path, help="JSON config (defaults when omitted)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for per-view stages")
        if scene:
            p.add_argument("--scene", type=Path, required=True, help="directory with field.ply and cameras.json")
        return p

    common(sub.add_parser("synth", help="generate a synthetic scene, masks and normal maps"))
    p = common(sub.add_parser("render", help="render maps of a field"), scene=True)
    p.add_argument("--views", help="comma-separated view indices (default: all)")
    p.add_argument("--field-name", default="field.ply")
    p = common(sub.add_parser("optimize", help="train descriptors and normals"), scene=True)
    p.add_argument("--masks", type=Path, help="directory of view_{i}.pgm masks (default: <scene>/masks)")
    p.add_argument("--normals", type=Path, help="directory of view_{i}.pfm normal maps")
    p = common(sub.add_parser("parse-planes", help="build the mixture tree and label primitives"), scene=True)
    p.add_argument("--masks", type=Path)
    p.add_argument("--field-name", default="trained.ply")
    p = common(sub.add_parser("eval", help="compare predicted labels with ground truth"))
    p.add_argument("--labels", type=Path, required=True, help="labels.ply from parse-planes")
    p.add_argument("--gt", type=Path, required=True, help="field PLY with plane_id, or a labels PLY")
    p.add_argument("--gt-planes", type=Path, help="gt_planes.json for accuracy/completeness")
    p = common(sub.add_parser("pipeline", help="synth, optimize, parse-planes and eval in one go"))
    p.add_argument("--masks", type=Path, help="import external masks instead of simulating them")
    p.add_argument("--normals", type=Path, help="import supervision normal maps (PFM)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        args.out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(args.out)
        t0 = time.perf_counter()
        summary = COMMANDS[stage](args, manifest)
        manifest.save()
    except StageError as exc:
        _report_error(exc.stage, exc.__cause__ or exc)
        return 1
    except ConfigError as exc:
        _report_error("config", exc)
        return 2
    except Exception as exc:
        _report_error(stage, exc)
        return 1
    log.info("%s finished in %.1fs", stage, time.perf_counter() - t0)
    print(json.dumps({"stage": stage, "ok": True, "summary": summary}, sort_keys=True, default=str))
    return 0


def _report_error(stage: str, exc: BaseException) -> None:
    print(json.dumps({"ok": False, "stage": stage, "error": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
