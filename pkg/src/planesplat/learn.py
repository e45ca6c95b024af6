"""Descriptor and normal learning.

Per view, rendered descriptors are regressed in closed form onto the one-hot
merged segment labels; the L1 residual of that fit is pushed back through the
blend weights into the per-Gaussian descriptors. Normals follow a cosine loss
against supervision normal maps. A recurrent mean-shift on the unit sphere
sharpens descriptor clusters across the whole field.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .field import Scene, normalize_rows
from .render import RenderedMaps, splat_transpose

log = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-4
DEFAULT_LR = 0.5
EXACT_MEAN_SHIFT_LIMIT = 20_000


@dataclass
class RegressionSolve:
    design: np.ndarray     # [Z | 1], n x (k+1)
    targets: np.ndarray    # Y, n x m
    weights: np.ndarray    # W-hat, (k+1) x m
    ridge: float
    predictions: np.ndarray
    loss: float
    condition: float

    def normal_equation_residual(self) -> float:
        A, W, Y = self.design, self.weights, self.targets
        return float(np.linalg.norm(A.T @ (A @ W - Y) + self.ridge * W))


def solve_regression(Z: np.ndarray, Y: np.ndarray, ridge: float = DEFAULT_RIDGE) -> RegressionSolve:
    """Ridge least squares from rendered descriptors to one-hot targets.

    Returns the fit together with its L1 segmentation loss
    ``sum_i ||y_i - [z_i | 1] W||_1``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Z.ndim != 2 or Y.ndim != 2 or len(Z) != len(Y) or len(Z) == 0 or Y.shape[1] == 0:
        raise ValueError("need n >= 1 matching rows in Z and Y and m >= 1")
    A = np.concatenate([Z, np.ones((len(Z), 1))], axis=1)
    G = A.T @ A + ridge * np.eye(A.shape[1])
    W = np.linalg.solve(G, A.T @ Y)
    pred = A @ W
    cond = float(np.linalg.cond(G))
    if len(Z) < A.shape[1]:
        log.debug("regression underdetermined (n=%d); ridge keeps it solvable, cond=%.3g", len(Z), cond)
    return RegressionSolve(A, Y, W, ridge, pred, float(np.abs(Y - pred).sum()), cond)


def _unit_jacobian_t(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Backprop ``grad_unit`` through x -> x/|x| (rows)."""
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / np.maximum(norm, 1e-12)
    proj = grad_unit - (grad_unit * unit).sum(axis=1, keepdims=True) * unit
    return proj / np.maximum(norm, 1e-12)


def segmentation_pixel_grad(raw: np.ndarray, solve: RegressionSolve) -> np.ndarray:
    """dL_seg / d(raw blended descriptor) per pixel, W-hat held fixed."""
    k = raw.shape[1]
    sign = np.sign(solve.predictions - solve.targets)
    grad_unit = sign @ solve.weights[:k].T
    return _unit_jacobian_t(raw, grad_unit)


def segmentation_loss(raw: np.ndarray, Y: np.ndarray, W: np.ndarray) -> float:
    """L_seg for raw blended descriptors at a fixed W (finite-difference target)."""
    z = normalize_rows(raw)
    pred = np.concatenate([z, np.ones((len(z), 1))], axis=1) @ W
    return float(np.abs(Y - pred).sum())


def projected_step(values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """values <- normalize(values - lr * grad), leaving zero-gradient rows untouched."""
    moved = np.abs(grad).sum(axis=1) > 0
    out = values.copy()
    out[moved] = normalize_rows(values[moved] - lr * grad[moved])
    return out


def descriptor_gradient(scene: Scene, maps: RenderedMaps, pixels: np.ndarray, solve: RegressionSolve) -> np.ndarray:
    """Per-Gaussian gradient of L_seg through the blend weights."""
    if maps.weights is None:
        raise ValueError("render with retain_weights=True before taking gradients")
    H, W = maps.shape
    raw = maps.descriptor_raw.reshape(H * W, -1)
    pix_grad = np.zeros_like(raw)
    pix_grad[pixels] = segmentation_pixel_grad(raw[pixels], solve)
    return splat_transpose(pix_grad, maps.weights, len(scene))


def descriptor_gradient_step(scene: Scene, maps: RenderedMaps, pixels: np.ndarray, solve: RegressionSolve,
                             lr: float = DEFAULT_LR) -> np.ndarray:
    """Updated unit descriptors after one projected gradient step on L_seg."""
    return projected_step(scene.descriptors, descriptor_gradient(scene, maps, pixels, solve), lr)


def normal_loss(raw: np.ndarray, target: np.ndarray) -> float:
    return float((1.0 - (normalize_rows(raw) * target).sum(axis=1)).sum())


def normal_gradient(scene: Scene, maps: RenderedMaps, supervision: np.ndarray) -> tuple[float, np.ndarray]:
    """Cosine normal loss over valid pixels and its per-Gaussian gradient.

    ``supervision`` is (H, W, 3) in world coordinates, NaN where unavailable.
    """
    if maps.weights is None:
        raise ValueError("render with retain_weights=True before taking gradients")
    H, W = maps.shape
    raw = maps.normal_raw.reshape(H * W, 3)
    target = supervision.reshape(H * W, 3)
    pixels = np.flatnonzero(maps.valid.ravel() & np.isfinite(target).all(axis=1))
    if len(pixels) == 0:
        return 0.0, np.zeros_like(scene.normals)
    loss = normal_loss(raw[pixels], target[pixels])
    pix_grad = np.zeros_like(raw)
    pix_grad[pixels] = _unit_jacobian_t(raw[pixels], -target[pixels])
    return loss, splat_transpose(pix_grad, maps.weights, len(scene))


def normal_loss_step(scene: Scene, maps: RenderedMaps, supervision: np.ndarray,
                     lr: float = DEFAULT_LR) -> tuple[float, np.ndarray]:
    """Normal loss and the unit normals after one projected gradient step."""
    loss, grad = normal_gradient(scene, maps, supervision)
    return loss, projected_step(scene.normals, grad, lr)


def photometric_loss(maps: RenderedMaps, reference: np.ndarray) -> float:
    """L1 colour term only; the SSIM term is not modelled."""
    return float(np.abs(maps.color - reference).sum())


# ---------------------------------------------------------------------------
# recurrent mean-shift

@dataclass
class MeanShiftConfig:
    rate: float = 0.5          # eta
    bandwidth: float = 60.0    # gamma
    steps: int = 10
    period: int = 100
    warmup: int = 500
    sample_size: int = 512     # M

    def validate(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("mean-shift rate must lie in [0, 1]")
        if self.bandwidth <= 0:
            raise ValueError("mean-shift bandwidth must be positive")
        if self.sample_size < 2:
            raise ValueError("mean-shift sample size must be >= 2")


def _kernel_means(Z: np.ndarray, bandwidth: float) -> np.ndarray:
    """Columns of Z^T K D^-1 as rows: vMF-weighted mean of all rows per row.

    The kernel is shifted by exp(-bandwidth); the column normalisation cancels it.
    """
    K = np.exp(bandwidth * (Z @ Z.T - 1.0))
    return (K.T @ Z) / K.sum(axis=0)[:, None]


def mean_shift_exact(Z: np.ndarray, cfg: MeanShiftConfig) -> np.ndarray:
    """``Z <- Z (eta K D^-1 + (1 - eta) I)`` with rows renormalised, ``cfg.steps`` times."""
    cfg.validate()
    Z = np.asarray(Z, dtype=np.float64)
    if len(Z) > EXACT_MEAN_SHIFT_LIMIT:
        raise ValueError(f"{len(Z)} rows exceed the exact mean-shift limit of {EXACT_MEAN_SHIFT_LIMIT}; "
                         "use mean_shift_sampled")
    for _ in range(cfg.steps):
        Z = normalize_rows(cfg.rate * _kernel_means(Z, cfg.bandwidth) + (1.0 - cfg.rate) * Z)
    return Z


def mean_shift_sampled(Z: np.ndarray, neighbors: np.ndarray, cfg: MeanShiftConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """Mean-shift with the kernel estimated on random subsets of M rows.

    Each round draws M not-yet-updated rows without replacement, computes
    their exact update on the M x M kernel, and hands each sample's kernel
    mean to its still-unvisited nearest neighbours (``neighbors`` is the
    (N, K) index table). Rounds repeat until every row has been updated.
    """
    cfg.validate()
    Z = np.asarray(Z, dtype=np.float64)
    N = len(Z)
    neighbors = np.asarray(neighbors, dtype=np.int64).reshape(N, -1)
    for _ in range(cfg.steps):
        target = np.empty_like(Z)
        visited = np.zeros(N, dtype=bool)
        while not visited.all():
            pool = np.flatnonzero(~visited)
            pick = rng.choice(pool, size=min(cfg.sample_size, len(pool)), replace=False)
            means = _kernel_means(Z[pick], cfg.bandwidth)
            target[pick] = means
            visited[pick] = True
            # each sample claims its unvisited neighbours, earlier draws first
            nb = neighbors[pick]
            owner = np.repeat(np.arange(len(pick)), nb.shape[1])
            flat = nb.ravel()
            fresh = ~visited[flat]
            flat, owner = flat[fresh], owner[fresh]
            flat, first = np.unique(flat, return_index=True)
            owner = owner[first]
            target[flat] = means[owner]
            visited[flat] = True
        Z = normalize_rows(cfg.rate * target + (1.0 - cfg.rate) * Z)
    return Z


def angular_spread(Z: np.ndarray) -> float:
    """Largest angle (radians) between a row and the normalised mean direction."""
    mean = Z.mean(axis=0)
    mean /= np.linalg.norm(mean)
    return float(np.arccos(np.clip(Z @ mean, -1.0, 1.0)).max())


def cosine_degrees(a: np.ndarray, b: np.ndarray) -> float:
    return math.degrees(math.acos(max(-1.0, min(1.0, float(a @ b)))))
