"""Procedural scenes with exact depth/normal ground truth and degraded
coarse inputs.

Geometry lives in the camera frame ``(x right, y down, z forward)`` where
``z`` is depth.  Stored normals use the package convention (see
``supervision``): ``-1`` times the camera-facing normal in that frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, use_numba
from .metrics import gaussian_blur
from .patchgrid import ImageExtent
from .supervision import CameraModel, pseudo_normals

LIGHT = np.array([0.3, 0.4, 0.87]) / np.linalg.norm([0.3, 0.4, 0.87])
DEFAULT_EXTENT = ImageExtent(96, 96)


class FrameError(ValueError):
    pass


@dataclass
class Sphere:
    center: tuple
    radius: float
    color: tuple = (0.8, 0.8, 0.8)


@dataclass
class Box:
    center: tuple
    half: tuple
    color: tuple = (0.8, 0.8, 0.8)


@dataclass
class PlanePatch:
    """Plane ``z = depth + a*(x - x0) + b*(y - y0)`` visible only inside the
    pixel rectangle ``region = (u0, v0, u1, v1)`` (end-exclusive)."""

    region: tuple
    depth: float
    gradient: tuple
    anchor: tuple = (0.0, 0.0)
    color: tuple = (0.8, 0.8, 0.8)


@dataclass
class SceneSpec:
    camera: CameraModel
    background_depth: float = 5.0
    background_tilt: tuple = (0.0, 0.0)
    primitives: list = field(default_factory=list)
    albedo_seed: int = 0
    background_color: tuple = (0.7, 0.7, 0.7)


@dataclass
class GeometryFrame:
    rgb: np.ndarray  # [3, H, W]
    depth: np.ndarray  # [H, W]
    normal: np.ndarray  # [3, H, W]
    camera: CameraModel

    @property
    def extent(self):
        return ImageExtent(*self.depth.shape)

    def validate(self, tol=1e-6):
        h, w = self.depth.shape
        if self.rgb.shape != (3, h, w) or self.normal.shape != (3, h, w):
            raise FrameError(f"misaligned rasters {self.rgb.shape} {self.depth.shape} {self.normal.shape}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth <= 0):
            raise FrameError("depth must be finite and positive")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise FrameError("rgb outside [0, 1]")
        norms = np.linalg.norm(self.normal, axis=0)
        if np.max(np.abs(norms - 1.0)) > tol:
            raise FrameError(f"normals not unit length (max dev {np.max(np.abs(norms - 1)):.3g})")
        return self


def _pack(spec: SceneSpec):
    spheres = np.zeros((0, 7))
    boxes = np.zeros((0, 9))
    planes = np.zeros((0, 12))
    rows = {"s": [], "b": [], "p": []}
    for prim in spec.primitives:
        if isinstance(prim, Sphere):
            rows["s"].append([*prim.center, prim.radius, *prim.color])
        elif isinstance(prim, Box):
            rows["b"].append([*prim.center, *prim.half, *prim.color])
        elif isinstance(prim, PlanePatch):
            rows["p"].append([prim.depth, *prim.gradient, *prim.anchor, *prim.region, *prim.color])
        else:
            raise TypeError(f"unknown primitive {prim!r}")
    if rows["s"]:
        spheres = np.array(rows["s"], dtype=np.float64)
    if rows["b"]:
        boxes = np.array(rows["b"], dtype=np.float64)
    if rows["p"]:
        planes = np.array(rows["p"], dtype=np.float64)
    background = np.array(
        [spec.background_depth, *spec.background_tilt, 0.0, 0.0, -1e9, -1e9, 1e9, 1e9,
         *spec.background_color]
    )
    planes = np.vstack([planes, background[None]])
    return spheres, boxes, planes


def _ray_grid(camera: CameraModel, h, w):
    """Ray origins and directions ``[H, W, 3]`` in the camera frame."""
    dirs = camera.rays(h, w)
    if camera.is_pinhole:
        return np.zeros_like(dirs), dirs
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                       indexing="ij")
    s = camera.pixel_size
    origins = np.stack([u * s, v * s, np.zeros_like(u)], axis=-1)
    return origins, dirs


@njit(cache=True)
def _cast_loop(origins, dirs, spheres, boxes, planes):
    h, w = origins.shape[0], origins.shape[1]
    depth = np.zeros((h, w))
    normal = np.zeros((3, h, w))
    color = np.zeros((3, h, w))
    point = np.zeros((3, h, w))
    for i in range(h):
        for j in range(w):
            ox, oy, oz = origins[i, j, 0], origins[i, j, 1], origins[i, j, 2]
            dx, dy, dz = dirs[i, j, 0], dirs[i, j, 1], dirs[i, j, 2]
            best = np.inf
            nx = ny = nz = 0.0
            cr = cg = cb = 0.0
            for s in range(spheres.shape[0]):
                px, py, pz, r = spheres[s, 0], spheres[s, 1], spheres[s, 2], spheres[s, 3]
                lx, ly, lz = ox - px, oy - py, oz - pz
                a = dx * dx + dy * dy + dz * dz
                b = 2.0 * (lx * dx + ly * dy + lz * dz)
                c = lx * lx + ly * ly + lz * lz - r * r
                disc = b * b - 4.0 * a * c
                if disc < 0.0:
                    continue
                t = (-b - np.sqrt(disc)) / (2.0 * a)
                if t <= 0.0 or t >= best:
                    continue
                best = t
                nx = (ox + t * dx - px) / r
                ny = (oy + t * dy - py) / r
                nz = (oz + t * dz - pz) / r
                cr, cg, cb = spheres[s, 4], spheres[s, 5], spheres[s, 6]
            for k in range(boxes.shape[0]):
                tmin = -np.inf
                tmax = np.inf
                ax = -1
                sign = 0.0
                ok = True
                for m in range(3):
                    o = origins[i, j, m]
                    d = dirs[i, j, m]
                    lo = boxes[k, m] - boxes[k, 3 + m]
                    hi = boxes[k, m] + boxes[k, 3 + m]
                    if d == 0.0:
                        if o < lo or o > hi:
                            ok = False
                        continue
                    t1 = (lo - o) / d
                    t2 = (hi - o) / d
                    sg = -1.0
                    if t1 > t2:
                        t1, t2 = t2, t1
                        sg = 1.0
                    if t1 > tmin:
                        tmin = t1
                        ax = m
                        sign = sg
                    if t2 < tmax:
                        tmax = t2
                if not ok or tmin > tmax or tmin <= 0.0 or tmin >= best or ax < 0:
                    continue
                best = tmin
                nx = sign if ax == 0 else 0.0
                ny = sign if ax == 1 else 0.0
                nz = sign if ax == 2 else 0.0
                cr, cg, cb = boxes[k, 6], boxes[k, 7], boxes[k, 8]
            for k in range(planes.shape[0]):
                if not (planes[k, 5] <= j < planes[k, 7] and planes[k, 6] <= i < planes[k, 8]):
                    continue
                z0, ga, gb, x0, y0 = planes[k, 0], planes[k, 1], planes[k, 2], planes[k, 3], planes[k, 4]
                den = dz - ga * dx - gb * dy
                if den == 0.0:
                    continue
                t = (z0 - ga * x0 - gb * y0 + ga * ox + gb * oy - oz) / den
                if t <= 0.0 or t >= best:
                    continue
                best = t
                inv = 1.0 / np.sqrt(ga * ga + gb * gb + 1.0)
                nx, ny, nz = ga * inv, gb * inv, -inv
                cr, cg, cb = planes[k, 9], planes[k, 10], planes[k, 11]
            if nx * dx + ny * dy + nz * dz > 0.0:
                nx, ny, nz = -nx, -ny, -nz
            depth[i, j] = oz + best * dz
            normal[0, i, j] = -nx
            normal[1, i, j] = -ny
            normal[2, i, j] = -nz
            color[0, i, j] = cr
            color[1, i, j] = cg
            color[2, i, j] = cb
            point[0, i, j] = ox + best * dx
            point[1, i, j] = oy + best * dy
            point[2, i, j] = oz + best * dz
    return depth, normal, color, point


def _cast_numpy(origins, dirs, spheres, boxes, planes):
    h, w = origins.shape[:2]
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    n_pix = o.shape[0]
    best = np.full(n_pix, np.inf)
    nrm = np.zeros((n_pix, 3))
    col = np.zeros((n_pix, 3))
    for s in spheres:
        c, r = s[:3], s[3]
        lvec = o - c
        a = (d * d).sum(1)
        b = 2.0 * (lvec * d).sum(1)
        cc = (lvec * lvec).sum(1) - r * r
        disc = b * b - 4.0 * a * cc
        hit = disc >= 0
        t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2.0 * a), np.inf)
        take = hit & (t > 0) & (t < best)
        best = np.where(take, t, best)
        p = o + t[:, None] * d if take.any() else o
        nrm[take] = ((p - c) / r)[take]
        col[take] = s[4:7]
    for bx in boxes:
        lo, hi = bx[:3] - bx[3:6], bx[:3] + bx[3:6]
        tmin = np.full(n_pix, -np.inf)
        tmax = np.full(n_pix, np.inf)
        ax = np.full(n_pix, -1)
        sign = np.zeros(n_pix)
        ok = np.ones(n_pix, dtype=bool)
        for m in range(3):
            dm, om = d[:, m], o[:, m]
            flat = dm == 0.0
            ok &= ~(flat & ((om < lo[m]) | (om > hi[m])))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[m] - om) / dm
                t2 = (hi[m] - om) / dm
            swap = t1 > t2
            t1, t2 = np.where(swap, t2, t1), np.where(swap, t1, t2)
            sg = np.where(swap, 1.0, -1.0)
            t1 = np.where(flat, -np.inf, t1)
            t2 = np.where(flat, np.inf, t2)
            upd = t1 > tmin
            tmin = np.where(upd, t1, tmin)
            ax = np.where(upd, m, ax)
            sign = np.where(upd, sg, sign)
            tmax = np.minimum(tmax, t2)
        take = ok & (tmin <= tmax) & (tmin > 0) & (tmin < best) & (ax >= 0)
        best = np.where(take, tmin, best)
        face = np.zeros((n_pix, 3))
        face[np.arange(n_pix), np.clip(ax, 0, 2)] = sign
        nrm[take] = face[take]
        col[take] = bx[6:9]
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    jj, ii = jj.ravel(), ii.ravel()
    for pl in planes:
        z0, ga, gb, x0, y0 = pl[:5]
        inside = (pl[5] <= jj) & (jj < pl[7]) & (pl[6] <= ii) & (ii < pl[8])
        den = d[:, 2] - ga * d[:, 0] - gb * d[:, 1]
        valid = inside & (den != 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z0 - ga * x0 - gb * y0 + ga * o[:, 0] + gb * o[:, 1] - o[:, 2]) / den
        take = valid & (t > 0) & (t < best)
        best = np.where(take, t, best)
        inv = 1.0 / np.sqrt(ga * ga + gb * gb + 1.0)
        nrm[take] = (ga * inv, gb * inv, -inv)
        col[take] = pl[9:12]
    flip = (nrm * d).sum(1) > 0
    nrm[flip] = -nrm[flip]
    pts = o + best[:, None] * d
    depth = pts[:, 2].reshape(h, w)
    normal = (-nrm).T.reshape(3, h, w)
    return depth, normal, col.T.reshape(3, h, w), pts.T.reshape(3, h, w)


def _albedo_texture(points, seed):
    rng = np.random.default_rng(seed)
    freq = rng.uniform(2.0, 5.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    tex = np.sin(freq[0] * points[0] + phase[0]) * np.sin(freq[1] * points[1] + phase[1])
    return 0.8 + 0.2 * tex


def render(spec: SceneSpec, extent: ImageExtent = DEFAULT_EXTENT, backend=None) -> GeometryFrame:
    """Ray-cast the scene: nearest-hit depth, analytic normals, Lambertian rgb."""
    h, w = extent.height, extent.width
    origins, dirs = _ray_grid(spec.camera, h, w)
    spheres, boxes, planes = _pack(spec)
    backend = backend or ("numba" if use_numba() else "numpy")
    cast = _cast_loop if backend == "numba" else _cast_numpy
    depth, normal, color, points = cast(
        np.ascontiguousarray(origins), np.ascontiguousarray(dirs), spheres, boxes, planes
    )
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise FrameError("scene leaves pixels without a positive-depth hit")
    shade = np.clip(np.einsum("chw,c->hw", normal, LIGHT), 0.0, 1.0)
    rgb = np.clip(color * _albedo_texture(points, spec.albedo_seed) * shade, 0.0, 1.0)
    return GeometryFrame(rgb, depth, normal, spec.camera)


# ------------------------------------------------------------- degradation


def area_downsample(x, factor):
    """Block means; written as offsets from the first block element so a
    constant block returns its value bit-exactly."""
    h, w = x.shape
    if h % factor or w % factor:
        raise FrameError(f"downsample factor {factor} must divide {h}x{w}")
    blocks = x.reshape(h // factor, factor, w // factor, factor)
    ref = blocks[:, :1, :, :1]
    return ref[:, 0, :, 0] + (blocks - ref).mean(axis=(1, 3))


def _linear_axis(n_out, n_in, factor):
    # half-pixel centres: low-res sample k sits at full-res (k + 0.5) * f - 0.5
    pos = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 2)
    return i0, pos - i0


def bilinear_upsample(x, factor):
    """Half-pixel aligned bilinear upsampling with linear extrapolation at the
    borders, so affine inputs are reproduced exactly."""
    h, w = x.shape
    if h < 2 or w < 2:
        return np.repeat(np.repeat(x, factor, 0), factor, 1)
    iy, fy = _linear_axis(h * factor, h, factor)
    ix, fx = _linear_axis(w * factor, w, factor)
    rows = x[iy] + fy[:, None] * (x[iy + 1] - x[iy])
    return rows[:, ix] + fx[None, :] * (rows[:, ix + 1] - rows[:, ix])


def low_frequency_field(shape, rng, grid=3):
    """Smooth random field scaled to max |value| = 1."""
    coarse = rng.standard_normal((grid, grid))
    h, w = shape
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    iy = np.clip(np.floor(ys).astype(int), 0, grid - 2)
    ix = np.clip(np.floor(xs).astype(int), 0, grid - 2)
    fy, fx = ys - iy, xs - ix
    rows = coarse[iy] * (1 - fy[:, None]) + coarse[iy + 1] * fy[:, None]
    field_ = rows[:, ix] * (1 - fx) + rows[:, ix + 1] * fx
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def fill_border(normals, mask):
    """Replace invalid border normals by the nearest valid interior row/column."""
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    if len(rows) == 0:
        return normals
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    inner = normals[:, r0:r1, c0:c1]
    h, w = mask.shape
    return np.pad(inner, ((0, 0), (r0, h - r1), (c0, w - c1)), mode="edge")


def degrade(frame: GeometryFrame, factor=4, blur_sigma=1.5, bias=0.05, rng=None):
    """Coarse depth and normals standing in for a low-resolution backbone.

    Depth is area-downsampled, bilinearly upsampled, blurred and multiplied by
    ``1 + bias * field`` with a smooth random field.  Coarse normals are
    plane-fit normals of the coarse depth.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = frame.depth.shape
    if h % factor or w % factor:
        raise FrameError(f"degrade factor {factor} must divide {h}x{w}")
    d = bilinear_upsample(area_downsample(frame.depth, factor), factor)
    if blur_sigma > 0:
        d = gaussian_blur(d, blur_sigma)
    noise = low_frequency_field(d.shape, rng)
    if bias:
        d = d * (1.0 + bias * noise)
    d = np.maximum(d, 1e-3 * frame.depth.min())
    field_ = pseudo_normals(d, frame.camera)
    normals = fill_border(field_.normals, field_.mask)
    normals = normals / np.linalg.norm(normals, axis=0, keepdims=True)
    return d, normals


# ----------------------------------------------------------------- scenes


def default_camera(extent: ImageExtent):
    f = float(extent.width)
    return CameraModel.pinhole(f, f, (extent.width - 1) / 2.0, (extent.height - 1) / 2.0)


def random_scene(rng: np.random.Generator, extent: ImageExtent = DEFAULT_EXTENT,
                 n_primitives=None) -> SceneSpec:
    cam = default_camera(extent)
    n = int(rng.integers(2, 7)) if n_primitives is None else n_primitives
    bg_depth = float(rng.uniform(7.0, 10.0))
    tilt = tuple(rng.uniform(-0.15, 0.15, size=2))

    def colour():
        return tuple(rng.uniform(0.35, 1.0, size=3))

    def lift(u, v, z):
        return ((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z)

    prims = []
    for _ in range(n):
        kind = rng.integers(0, 3)
        u = rng.uniform(0.1, 0.9) * extent.width
        v = rng.uniform(0.1, 0.9) * extent.height
        z = float(rng.uniform(3.0, 6.0))
        if kind == 0:
            prims.append(Sphere(lift(u, v, z), float(rng.uniform(0.4, 1.2)), colour()))
        elif kind == 1:
            half = tuple(rng.uniform(0.3, 1.0, size=3))
            prims.append(Box(lift(u, v, z), half, colour()))
        else:
            pw = rng.uniform(0.15, 0.4) * extent.width
            ph = rng.uniform(0.15, 0.4) * extent.height
            region = (float(max(0.0, u - pw / 2)), float(max(0.0, v - ph / 2)),
                      float(min(extent.width, u + pw / 2)),
                      float(min(extent.height, v + ph / 2)))
            grad = tuple(rng.uniform(-0.6, 0.6, size=2))
            x0, y0, _ = lift(u, v, z)
            prims.append(PlanePatch(region, z, grad, (x0, y0), colour()))
    return SceneSpec(cam, bg_depth, tilt, prims, int(rng.integers(0, 2**31)), colour())
