"""Gaussian field data types and file I/O.

A :class:`Scene` stores its primitives column-wise (one array per attribute)
so the renderer and the optimizers can work on whole fields at once.
:class:`GaussianPrimitive` is the per-record view used at API boundaries.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

UNIT_TOL = 1e-6
DEFAULT_DESCRIPTOR_DIM = 3


class FieldError(ValueError):
    """Raised for invalid field data or malformed field files."""


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions for (..., 3, 3) rotation matrices, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[i] = -q if q[0] < 0 else q
    return out.reshape(R.shape[:-2] + (4,))


def covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched R diag(s)^2 R^T for (N, 3) scales and (N, 4) quaternions."""
    R = quaternion_to_matrix(rotations)
    M = R * np.asarray(scales, dtype=np.float64)[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def normalize_rows(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps)


def random_unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return normalize_rows(rng.standard_normal((n, dim)))


@dataclass
class GaussianPrimitive:
    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    normal: np.ndarray
    descriptor: np.ndarray
    gt_plane_id: int | None = None

    def __post_init__(self):
        for name in ("center", "scale", "rotation", "color", "normal", "descriptor"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.opacity = float(self.opacity)
        if self.center.shape != (3,) or self.scale.shape != (3,) or self.rotation.shape != (4,):
            raise FieldError("center/scale must be 3-vectors and rotation a 4-vector")
        if abs(np.linalg.norm(self.rotation) - 1.0) > UNIT_TOL:
            raise FieldError("rotation quaternion is not unit length")
        if abs(np.linalg.norm(self.normal) - 1.0) > UNIT_TOL:
            raise FieldError("normal is not unit length")
        if abs(np.linalg.norm(self.descriptor) - 1.0) > UNIT_TOL:
            raise FieldError("descriptor is not unit length")
        if not 0.0 <= self.opacity <= 1.0:
            raise FieldError(f"opacity {self.opacity} outside [0, 1]")
        if np.any(self.scale <= 0):
            raise FieldError("scale components must be positive")
        if self.gt_plane_id is not None and self.gt_plane_id < 0:
            raise FieldError("gt_plane_id must be non-negative")


def covariance_of(prim: GaussianPrimitive) -> np.ndarray:
    """3x3 covariance R S S^T R^T of a primitive."""
    return covariances(prim.scale[None], prim.rotation[None])[0]


@dataclass
class CameraView:
    fx: float
    fy: float
    u0: float
    v0: float
    width: int
    height: int
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise FieldError("focal lengths must be positive")
        R = self.world_to_camera[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > UNIT_TOL:
            raise FieldError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def camera_to_world(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.T
        out[:3, 3] = self.camera_center
        return out

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return (np.asarray(points_cam) - self.translation) @ self.rotation

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Camera-frame rays K^-1 (u, v, 1) with unit z component."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.u0) / self.fx, (v - self.v0) / self.fy, np.ones_like(u)], axis=-1)

    def backproject(self, u, v, depth) -> np.ndarray:
        """World points for pixels (u, v) at camera-frame depth z."""
        rays = self.pixel_rays(u, v) * np.asarray(depth, dtype=np.float64)[..., None]
        return self.to_world(rays)

    @staticmethod
    def look_at(eye, target, fx, fy, width, height, up=(0.0, 0.0, 1.0)) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera x (u), y (v), z (forward)
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        return CameraView(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height, W)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "u0": self.u0, "v0": self.v0,
            "width": self.width, "height": self.height,
            "world_to_camera": [float(x) for x in self.world_to_camera.ravel()],
        }

    @staticmethod
    def from_json(obj: dict) -> "CameraView":
        keys = {"fx", "fy", "u0", "v0", "width", "height", "world_to_camera"}
        missing = keys - set(obj)
        if missing:
            raise FieldError(f"camera record missing keys {sorted(missing)}")
        W = obj["world_to_camera"]
        if len(W) != 16:
            raise FieldError("world_to_camera must hold 16 floats")
        return CameraView(float(obj["fx"]), float(obj["fy"]), float(obj["u0"]), float(obj["v0"]),
                          int(obj["width"]), int(obj["height"]), np.asarray(W, dtype=np.float64))


@dataclass
class GtPlane:
    id: int
    normal: np.ndarray
    offset: float
    polygon: np.ndarray

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.polygon = np.asarray(self.polygon, dtype=np.float64).reshape(-1, 3)
        self.offset = float(self.offset)
        if abs(np.linalg.norm(self.normal) - 1.0) > UNIT_TOL:
            raise FieldError(f"ground-truth plane {self.id} normal is not unit length")

    def to_json(self) -> dict:
        return {"id": int(self.id), "normal": self.normal.tolist(), "offset": self.offset,
                "polygon": self.polygon.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "GtPlane":
        return GtPlane(int(obj["id"]), obj["normal"], obj["offset"], obj["polygon"])


@dataclass
class Scene:
    """Column-wise Gaussian field plus cameras and optional ground truth.

    ``plane_ids`` holds -1 where a primitive has no ground-truth plane.
    """

    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    descriptors: np.ndarray
    plane_ids: np.ndarray
    views: list[CameraView] = field(default_factory=list)
    gt_planes: list[GtPlane] | None = None

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(n, 3)
        desc = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        k = desc.shape[-1] if desc.ndim == 2 else (desc.size // n if n else DEFAULT_DESCRIPTOR_DIM)
        self.descriptors = desc.reshape(n, k)
        self.plane_ids = np.ascontiguousarray(self.plane_ids, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def validate(self) -> None:
        arrays = {"center": self.centers, "scale": self.scales, "rotation": self.rotations,
                  "opacity": self.opacities, "color": self.colors, "normal": self.normals,
                  "descriptor": self.descriptors}
        for name, arr in arrays.items():
            bad = ~np.isfinite(arr.reshape(len(self), -1)).all(axis=1)
            if bad.any():
                raise FieldError(f"record {int(np.argmax(bad))}: non-finite {name}")
        for name, arr in (("rotation", self.rotations), ("normal", self.normals),
                          ("descriptor", self.descriptors)):
            err = np.abs(np.linalg.norm(arr, axis=1) - 1.0)
            if len(err) and err.max() > UNIT_TOL:
                raise FieldError(f"record {int(np.argmax(err))}: {name} is not unit length")
        if ((self.opacities < 0) | (self.opacities > 1)).any():
            raise FieldError(f"record {int(np.argmax((self.opacities < 0) | (self.opacities > 1)))}: "
                             "opacity outside [0, 1]")
        if (self.scales <= 0).any():
            raise FieldError(f"record {int(np.argmax((self.scales <= 0).any(axis=1)))}: non-positive scale")
        if self.gt_planes is not None:
            ids = sorted(p.id for p in self.gt_planes)
            if ids != list(range(len(ids))):
                raise FieldError("ground-truth plane ids must be dense in [0, P)")

    def covariances(self) -> np.ndarray:
        return covariances(self.scales, self.rotations)

    def primitive(self, i: int) -> GaussianPrimitive:
        pid = int(self.plane_ids[i])
        return GaussianPrimitive(self.centers[i].copy(), self.scales[i].copy(), self.rotations[i].copy(),
                                 float(self.opacities[i]), self.colors[i].copy(), self.normals[i].copy(),
                                 self.descriptors[i].copy(), None if pid < 0 else pid)

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        return (self.primitive(i) for i in range(len(self)))

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return list(self)

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive], views=None, gt_planes=None,
                        descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM) -> "Scene":
        if not prims:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                       np.zeros((0, 3)), np.zeros((0, descriptor_dim)), np.zeros(0, dtype=np.int64),
                       list(views or []), gt_planes)
        return cls(
            np.stack([p.center for p in prims]), np.stack([p.scale for p in prims]),
            np.stack([p.rotation for p in prims]), np.array([p.opacity for p in prims]),
            np.stack([p.color for p in prims]), np.stack([p.normal for p in prims]),
            np.stack([p.descriptor for p in prims]),
            np.array([-1 if p.gt_plane_id is None else p.gt_plane_id for p in prims], dtype=np.int64),
            list(views or []), gt_planes,
        )

    def copy(self) -> "Scene":
        return Scene(self.centers.copy(), self.scales.copy(), self.rotations.copy(), self.opacities.copy(),
                     self.colors.copy(), self.normals.copy(), self.descriptors.copy(), self.plane_ids.copy(),
                     list(self.views), self.gt_planes)

    def subset(self, idx) -> "Scene":
        return Scene(self.centers[idx], self.scales[idx], self.rotations[idx], self.opacities[idx],
                     self.colors[idx], self.normals[idx], self.descriptors[idx], self.plane_ids[idx],
                     list(self.views), self.gt_planes)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_REQUIRED = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
             "opacity", "red", "green", "blue"]


def _field_columns(k: int) -> list[str]:
    return _REQUIRED + ["nx", "ny", "nz"] + [f"desc_{i}" for i in range(k)]


def save_field(scene: Scene, path, binary: bool = True) -> None:
    """Write the Gaussian field as PLY with doubles for every float property."""
    path = Path(path)
    k = scene.descriptor_dim
    cols = _field_columns(k)
    data = np.concatenate([scene.centers, scene.scales, scene.rotations, scene.opacities[:, None],
                           scene.colors, scene.normals, scene.descriptors], axis=1)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(scene)}"]
    header += [f"property double {c}" for c in cols] + ["property int plane_id", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            rec = np.empty(len(scene), dtype=[(c, "<f8") for c in cols] + [("plane_id", "<i4")])
            for j, c in enumerate(cols):
                rec[c] = data[:, j]
            rec["plane_id"] = scene.plane_ids
            fh.write(rec.tobytes())
        else:
            lines = []
            for row, pid in zip(data, scene.plane_ids):
                lines.append(" ".join(repr(float(x)) for x in row) + f" {int(pid)}")
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def _parse_header(fh) -> tuple[str, int, list[tuple[str, str]], int]:
    first = fh.readline()
    if first.strip() != b"ply":
        raise FieldError("line 1: not a PLY file (missing 'ply' magic)")
    fmt, count, props = None, None, []
    lineno, in_vertex = 1, False
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise FieldError(f"line {lineno}: unexpected end of header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise FieldError(f"line {lineno}: unsupported format {' '.join(parts[1:])!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = len(parts) == 3 and parts[1] == "vertex"
            if in_vertex:
                try:
                    count = int(parts[2])
                except ValueError:
                    raise FieldError(f"line {lineno}: bad vertex count {parts[2]!r}") from None
            elif count is None:
                raise FieldError(f"line {lineno}: element {parts[1]!r} before vertex element is unsupported")
        elif parts[0] == "property":
            if not in_vertex:
                continue
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise FieldError(f"line {lineno}: unsupported property declaration {' '.join(parts)!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
        else:
            raise FieldError(f"line {lineno}: unexpected header keyword {parts[0]!r}")
    if fmt is None or count is None:
        raise FieldError("header lacks format or vertex element")
    return fmt, count, props, lineno


def load_field(path, seed: int = 0, descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM) -> Scene:
    """Read a PLY Gaussian field.

    Missing normals or descriptors are filled with random unit vectors drawn
    from ``np.random.default_rng(seed)``, so plain 3DGS exports load too.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, count, props, header_lines = _parse_header(fh)
        names = [p for p, _ in props]
        missing = [c for c in _REQUIRED if c not in names]
        if missing:
            raise FieldError(f"{path}: missing required vertex properties {missing}")
        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise FieldError(f"{path}: record {len(buf) // dtype.itemsize}: truncated binary body")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            cols = {n: rec[n].astype(np.float64) for n in names}
        else:
            table = np.empty((count, len(names)))
            for i in range(count):
                raw = fh.readline()
                parts = raw.split()
                if len(parts) != len(names):
                    raise FieldError(f"{path}: line {header_lines + 1 + i} (record {i}): expected "
                                     f"{len(names)} values, got {len(parts)}")
                try:
                    table[i] = [float(x) for x in parts]
                except ValueError:
                    raise FieldError(f"{path}: line {header_lines + 1 + i} (record {i}): non-numeric value") from None
            cols = {n: table[:, j] for j, n in enumerate(names)}

    for n in names:
        bad = ~np.isfinite(cols[n])
        if bad.any():
            raise FieldError(f"{path}: record {int(np.argmax(bad))}: non-finite {n}")

    rng = np.random.default_rng(seed)
    stack = lambda keys: np.stack([cols[k] for k in keys], axis=1)  # noqa: E731
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = normalize_rows(stack(["nx", "ny", "nz"]))
    else:
        normals = random_unit_vectors(rng, count, 3)
    desc_keys = sorted((n for n in names if n.startswith("desc_")), key=lambda s: int(s[5:]))
    if desc_keys:
        descriptors = normalize_rows(stack(desc_keys))
    else:
        descriptors = random_unit_vectors(rng, count, descriptor_dim)
    plane_ids = cols["plane_id"].astype(np.int64) if "plane_id" in cols else np.full(count, -1, dtype=np.int64)
    scene = Scene(stack(["x", "y", "z"]), stack(["scale_0", "scale_1", "scale_2"]),
                  normalize_rows(stack(["rot_0", "rot_1", "rot_2", "rot_3"])), cols["opacity"],
                  stack(["red", "green", "blue"]), normals, descriptors, plane_ids)
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# JSON side files

def save_cameras(views: Sequence[CameraView], path) -> None:
    Path(path).write_text(json.dumps([v.to_json() for v in views], indent=1))


def load_cameras(path) -> list[CameraView]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise FieldError(f"{path}: expected a JSON array of cameras")
    return [CameraView.from_json(obj) for obj in data]


def save_gt_planes(planes: Sequence[GtPlane], path) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in planes], indent=1))


def load_gt_planes(path) -> list[GtPlane]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise FieldError(f"{path}: expected a JSON array of planes")
    return [GtPlane.from_json(obj) for obj in data]
