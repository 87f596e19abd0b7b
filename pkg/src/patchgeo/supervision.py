"""Training objective: pseudo-normals from ground-truth depth plus the depth,
normal and total losses.

Normal convention used across the package: components are expressed in the
frame ``x = -u``, ``y = -v``, ``z`` pointing from the scene toward the
camera, and normals face the camera.  For an orthographic view of
``depth = a*u + b*v + c`` this gives ``(-a, -b, 1) / norm``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from ._accel import njit, use_numba

DEFAULT_WINDOW = 5


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    kind: str = "pinhole"
    fx: float = 1.0
    fy: float = 1.0
    cx: float = 0.0
    cy: float = 0.0
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.kind not in ("pinhole", "orthographic"):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if self.kind == "pinhole" and (self.fx <= 0 or self.fy <= 0):
            raise ValueError("focal lengths must be positive")
        if self.pixel_size <= 0:
            raise ValueError("pixel size must be positive")

    @classmethod
    def orthographic(cls, pixel_size=1.0):
        return cls("orthographic", pixel_size=pixel_size)

    @classmethod
    def pinhole(cls, fx, fy, cx, cy):
        return cls("pinhole", fx, fy, cx, cy)

    @property
    def is_pinhole(self):
        return self.kind == "pinhole"

    def rays(self, height, width):
        """Per-pixel ray directions ``[H, W, 3]`` in the (u, v, depth) camera
        frame, scaled so the depth component is 1 (pinhole) or the unit view
        direction (orthographic)."""
        v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                           np.arange(width, dtype=np.float64), indexing="ij")
        if self.is_pinhole:
            return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                             np.ones_like(u)], axis=-1)
        return np.broadcast_to(np.array([0.0, 0.0, 1.0]), (height, width, 3)).copy()

    def backproject(self, depth):
        """3D points ``[H, W, 3]`` in the (u, v, depth) camera frame."""
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
        if self.is_pinhole:
            return self.rays(h, w) * depth[..., None]
        v, u = np.meshgrid(np.arange(h, dtype=np.float64),
                           np.arange(w, dtype=np.float64), indexing="ij")
        s = self.pixel_size
        return np.stack([u * s, v * s, depth], axis=-1)

    def to_params(self):
        return [self.kind, self.fx, self.fy, self.cx, self.cy, self.pixel_size]

    @classmethod
    def from_params(cls, values):
        kind, *rest = values
        return cls(str(kind), *(float(x) for x in rest))


@dataclass(frozen=True)
class LossWeights:
    depth: float = 1.0
    normal: float = 0.01
    grad: float = 0.5
    mse: float = 1.0

    def __post_init__(self):
        for k in ("depth", "normal", "grad", "mse"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass
class PseudoNormalField:
    normals: np.ndarray  # [3, H, W]
    mask: np.ndarray  # [H, W] bool


# Relative eigenvalue threshold below which a neighbourhood is called rank < 2.
_RANK_TOL = 1e-10


@njit(cache=True)
def _plane_normals_loop(points, view, r, rank_tol):
    h, w = points.shape[0], points.shape[1]
    normals = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=np.bool_)
    n_pts = (2 * r + 1) * (2 * r + 1)
    for i in range(r, h - r):
        for j in range(r, w - r):
            mean = np.zeros(3)
            for a in range(i - r, i + r + 1):
                for b in range(j - r, j + r + 1):
                    for k in range(3):
                        mean[k] += points[a, b, k]
            mean /= n_pts
            cov = np.zeros((3, 3))
            for a in range(i - r, i + r + 1):
                for b in range(j - r, j + r + 1):
                    for k in range(3):
                        dk = points[a, b, k] - mean[k]
                        for m in range(3):
                            cov[k, m] += dk * (points[a, b, m] - mean[m])
            cov /= n_pts
            evals, evecs = np.linalg.eigh(cov)
            if evals[1] <= rank_tol * evals[2] or evals[2] <= 0.0:
                continue
            n0 = evecs[0, 0]
            n1 = evecs[1, 0]
            n2 = evecs[2, 0]
            facing = n0 * view[i, j, 0] + n1 * view[i, j, 1] + n2 * view[i, j, 2]
            s = 1.0 if facing > 0 else -1.0
            norm = np.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
            # stored frame is (-u, -v, toward camera) = -(u, v, depth)
            normals[i, j, 0] = -s * n0 / norm
            normals[i, j, 1] = -s * n1 / norm
            normals[i, j, 2] = -s * n2 / norm
            mask[i, j] = True
    return normals, mask


def _plane_normals_numpy(points, view, r, rank_tol):
    h, w, _ = points.shape
    k = 2 * r + 1
    win = np.lib.stride_tricks.sliding_window_view(points, (k, k), axis=(0, 1))
    win = win.reshape(h - 2 * r, w - 2 * r, 3, k * k)
    centred = win - win.mean(axis=-1, keepdims=True)
    cov = np.einsum("...in,...jn->...ij", centred, centred) / (k * k)
    evals, evecs = np.linalg.eigh(cov)
    n = evecs[..., :, 0]
    facing = (n * view[r:h - r, r:w - r]).sum(axis=-1, keepdims=True)
    n = np.where(facing > 0, n, -n)
    n = -n / np.linalg.norm(n, axis=-1, keepdims=True)
    ok = (evals[..., 1] > rank_tol * evals[..., 2]) & (evals[..., 2] > 0)
    normals = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    normals[r:h - r, r:w - r] = np.where(ok[..., None], n, 0.0)
    mask[r:h - r, r:w - r] = ok
    return normals, mask


def pseudo_normals(depth_gt, camera: CameraModel, window=DEFAULT_WINDOW, backend=None):
    """Least-squares plane normals over ``window x window`` neighbourhoods.

    Border pixels and rank-deficient neighbourhoods are masked invalid and
    hold ``(0, 0, 1)``.
    """
    if window % 2 == 0 or window < 3:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    depth_gt = np.asarray(depth_gt, dtype=np.float64)
    if not np.all(depth_gt > 0):
        raise ValueError("pseudo_normals needs strictly positive depth")
    points = camera.backproject(depth_gt)
    # direction from the surface toward the camera, in the (u, v, depth) frame
    view = -points if camera.is_pinhole else -camera.rays(*depth_gt.shape)
    backend = backend or ("numba" if use_numba() else "numpy")
    fn = _plane_normals_loop if backend == "numba" else _plane_normals_numpy
    normals, mask = fn(points, np.ascontiguousarray(view), window // 2, _RANK_TOL)
    normals[~mask] = (0.0, 0.0, 1.0)
    return PseudoNormalField(np.ascontiguousarray(normals.transpose(2, 0, 1)), mask)


def _mask_or_ones(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    return np.broadcast_to(np.asarray(mask, dtype=bool), shape)


def depth_loss(d_refined, d_gt, grad_weight=0.5, mask=None):
    """Masked MSE plus ``grad_weight`` times the pooled mean squared
    difference of horizontal and vertical forward differences."""
    d_refined = nc.as_tensor(d_refined)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    mask = _mask_or_ones(mask, d_gt.shape)
    n = mask.sum()
    if n == 0:
        raise LossError("depth loss: empty valid mask")
    diff = d_refined - d_gt
    mse = nc.tsum(nc.square(diff) * mask.astype(np.float64)) * (1.0 / n)
    if grad_weight == 0:
        return mse
    mx = (mask[..., :, 1:] & mask[..., :, :-1]).astype(np.float64)
    my = (mask[..., 1:, :] & mask[..., :-1, :]).astype(np.float64)
    count = mx.sum() + my.sum()
    if count == 0:
        return mse
    gx = diff[..., :, 1:] - diff[..., :, :-1]
    gy = diff[..., 1:, :] - diff[..., :-1, :]
    grad = (nc.tsum(nc.square(gx) * mx) + nc.tsum(nc.square(gy) * my)) * (1.0 / count)
    return mse + grad * grad_weight


def normal_loss(n_refined, n_pseudo, mask=None, mse_weight=1.0, floor=1e-8):
    """Mean ``1 - cos`` between unit-normalised predictions and pseudo-normals
    plus ``mse_weight`` times the elementwise MSE of the raw predictions.

    Normals carry their 3 channels on axis ``-3``.
    """
    n_refined = nc.as_tensor(n_refined)
    n_pseudo = np.asarray(n_pseudo, dtype=np.float64)
    pix_shape = n_pseudo.shape[:-3] + n_pseudo.shape[-2:]
    mask = _mask_or_ones(mask, pix_shape)
    n = mask.sum()
    if n == 0:
        raise LossError("normal loss: all pixels invalid")
    m = np.expand_dims(mask.astype(np.float64), -3)
    unit = nc.normalize(n_refined, axis=-3, floor=floor)
    cos = nc.tsum(unit * n_pseudo, axis=-3, keepdims=True)
    angular = nc.tsum((1.0 - cos) * m) * (1.0 / n)
    if mse_weight == 0:
        return angular
    mse = nc.tsum(nc.square(n_refined - n_pseudo) * m) * (1.0 / (3 * n))
    return angular + mse * mse_weight


def total_loss(d_refined, n_refined, d_gt, camera=None, weights=LossWeights(),
               pseudo: PseudoNormalField | None = None, depth_mask=None):
    """``w.depth * depth_loss + w.normal * normal_loss``.

    Pseudo-normals come from ``d_gt`` (computed here when ``pseudo`` is not
    supplied); they are constants with respect to the prediction.
    """
    return loss_breakdown(d_refined, n_refined, d_gt, camera, weights, pseudo, depth_mask)[0]


def loss_breakdown(d_refined, n_refined, d_gt, camera=None, weights=LossWeights(),
                   pseudo: PseudoNormalField | None = None, depth_mask=None):
    """Like ``total_loss`` but also returns the unweighted terms."""
    terms = {}
    total = None
    if weights.depth > 0:
        terms["depth"] = depth_loss(d_refined, d_gt, weights.grad, depth_mask)
        total = terms["depth"] * weights.depth
    if weights.normal > 0:
        if pseudo is None:
            if camera is None:
                raise LossError("total loss needs a camera to derive pseudo-normals")
            pseudo = pseudo_normals(d_gt, camera)
        terms["normal"] = normal_loss(n_refined, pseudo.normals, pseudo.mask, weights.mse)
        part = terms["normal"] * weights.normal
        total = part if total is None else total + part
    if total is None:
        total = nc.Tensor(0.0)
    return total, terms
