"""Evaluation metrics for refined depth and normals."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ._accel import njit, use_numba
from .patchgrid import PatchSet

DELTA_THRESHOLD = 1.25
TRUNCATION = 10.0
CE_BAND_REF = 270
CE_PATCH_REF = 540
CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.2
_BIG = 1e20


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    absrel: float = float("nan")
    delta1: float = float("nan")
    rmse: float = float("nan")
    ce: float = float("nan")
    pdbe_acc: float = float("nan")
    pdbe_compl: float = float("nan")
    normal_mean: float = float("nan")
    normal_median: float = float("nan")
    normal_rms: float = float("nan")
    pct_5: float = float("nan")
    pct_11_25: float = float("nan")
    pct_30: float = float("nan")

    def to_text(self):
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        vals = {}
        names = {f.name for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key in names:
                vals[key] = float(value)
        return cls(**vals)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def mean(cls, reports):
        """Unweighted mean of each field across reports."""
        reports = list(reports)
        if not reports:
            raise MetricError("no reports to aggregate")
        out = {}
        for f in fields(cls):
            vals = [getattr(r, f.name) for r in reports]
            vals = [v for v in vals if np.isfinite(v)]
            out[f.name] = float(np.mean(vals)) if vals else float("nan")
        return cls(**out)


def _valid(mask, shape):
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("empty evaluation mask")
    return mask


def depth_metrics(pred, gt, mask=None):
    """``(absrel, delta1, rmse)`` over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = _valid(mask, gt.shape)
    p, g = pred[mask], gt[mask]
    if np.any(g <= 0):
        raise MetricError("ground-truth depth must be positive on valid pixels")
    err = p - g
    absrel = float(np.mean(np.abs(err) / g))
    rmse = float(np.sqrt(np.mean(err * err)))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / np.where(p > 0, p, 1.0), np.inf))
    delta1 = float(np.mean(ratio < DELTA_THRESHOLD))
    return absrel, delta1, rmse


def ce_band(patch_height):
    """Boundary band width scaled from 270 px at 540 px patches."""
    return int(round(CE_BAND_REF * patch_height / CE_PATCH_REF))


def _band_slice(lo, hi, band):
    width = hi - lo
    if width < band:
        raise MetricError(f"patch overlap {width} px is narrower than the CE band {band} px")
    start = lo + (width - band) // 2
    return start, start + band


def adjacent_pairs(pset: PatchSet):
    """Right and down neighbours in the grid layout (row-major indices)."""
    pairs = []
    for i in range(pset.rows):
        for j in range(pset.cols):
            k = i * pset.cols + j
            if j + 1 < pset.cols:
                pairs.append((k, k + 1, "h"))
            if i + 1 < pset.rows:
                pairs.append((k, k + pset.cols, "v"))
    return pairs


def consistency_error(preds, pset: PatchSet, band=None):
    """Mean absolute disagreement of adjacent patches inside the boundary band.

    ``preds`` is ``[P, h, w]`` in the layout of ``pset``.  For each adjacent
    pair the band is the central ``band`` columns (or rows) of their overlap
    window; the per-pair means are averaged.
    """
    preds = np.asarray(preds, dtype=np.float64)
    ph, pw = pset.patch_size
    band = ce_band(ph) if band is None else int(band)
    if band < 1 or band > min(ph, pw):
        raise MetricError(f"CE band {band} must lie in [1, {min(ph, pw)}]")
    pairs = adjacent_pairs(pset)
    if not pairs:
        raise MetricError("consistency error needs at least two adjacent patches")
    errs = []
    for a, b, axis in pairs:
        pa, pb = pset.patches[a], pset.patches[b]
        y0, y1 = max(pa.y, pb.y), min(pa.y + ph, pb.y + ph)
        x0, x1 = max(pa.x, pb.x), min(pa.x + pw, pb.x + pw)
        if axis == "h":
            x0, x1 = _band_slice(x0, x1, band)
        else:
            y0, y1 = _band_slice(y0, y1, band)
        va = preds[a, y0 - pa.y:y1 - pa.y, x0 - pa.x:x1 - pa.x]
        vb = preds[b, y0 - pb.y:y1 - pb.y, x0 - pb.x:x1 - pb.x]
        errs.append(np.mean(np.abs(va - vb)))
    return float(np.mean(errs))


def normal_metrics(pred, gt, mask=None):
    """Angular error statistics (degrees / percent) for ``[3, H, W]`` fields."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = _valid(mask, gt.shape[1:])
    cos = np.clip((pred * gt).sum(axis=0), -1.0, 1.0)[mask]
    ang = np.degrees(np.arccos(cos))
    return {
        "normal_mean": float(ang.mean()),
        "normal_median": float(np.median(ang)),
        "normal_rms": float(np.sqrt(np.mean(ang * ang))),
        "pct_5": float(np.mean(ang < 5.0) * 100),
        "pct_11_25": float(np.mean(ang < 11.25) * 100),
        "pct_30": float(np.mean(ang < 30.0) * 100),
    }


# ---------------------------------------------------------------- Canny


def _correlate_rows(x, k):
    r = len(k) // 2
    xp = np.pad(x, ((0, 0), (r, r)), mode="edge")
    # accumulate offsets from the centre so constant rows stay bit-exact
    acc = np.zeros_like(x)
    for i, w in enumerate(k):
        if i != r:
            acc += w * (xp[:, i:i + x.shape[1]] - x)
    return x + acc


def gaussian_blur(x, sigma):
    if sigma <= 0:
        return np.array(x, dtype=np.float64)
    r = int(np.ceil(3 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    x = np.asarray(x, dtype=np.float64)
    return _correlate_rows(_correlate_rows(x, k).T, k).T


def sobel(x):
    xp = np.pad(x, 1, mode="edge")
    h, w = x.shape

    def s(dy, dx):
        return xp[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return gx, gy


def _direction_bins(gx, gy):
    # 0: horizontal gradient, 1: 45 deg, 2: vertical, 3: 135 deg
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    return (((ang + 22.5) // 45.0) % 4).astype(np.int64)


# neighbour offsets (dy, dx) along the gradient for each direction bin
_NMS_STEP = np.array([[0, 1], [1, 1], [1, 0], [1, -1]], dtype=np.int64)


@njit(cache=True)
def _nms_loop(mag, bins, step, tol):
    h, w = mag.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            m = mag[i, j]
            if m <= 0.0:
                continue
            dy = step[bins[i, j], 0]
            dx = step[bins[i, j], 1]
            ia, ja = i + dy, j + dx
            ib, jb = i - dy, j - dx
            after = mag[ia, ja] if 0 <= ia < h and 0 <= ja < w else 0.0
            before = mag[ib, jb] if 0 <= ib < h and 0 <= jb < w else 0.0
            if m > before + tol and m >= after - tol:
                out[i, j] = m
    return out


def _nms_numpy(mag, bins, step, tol):
    h, w = mag.shape
    pad = np.pad(mag, 1)
    dy = step[bins, 0]
    dx = step[bins, 1]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    after = pad[ii + dy + 1, jj + dx + 1]
    before = pad[ii - dy + 1, jj - dx + 1]
    keep = (mag > 0) & (mag > before + tol) & (mag >= after - tol)
    return np.where(keep, mag, 0.0)


@njit(cache=True)
def _hysteresis_loop(mag, low, high):
    h, w = mag.shape
    edges = np.zeros((h, w), dtype=np.uint8)
    stack = np.empty((h * w, 2), dtype=np.int64)
    top = 0
    for i in range(h):
        for j in range(w):
            if mag[i, j] >= high and edges[i, j] == 0:
                edges[i, j] = 1
                stack[top, 0] = i
                stack[top, 1] = j
                top += 1
                while top > 0:
                    top -= 1
                    ci = stack[top, 0]
                    cj = stack[top, 1]
                    for di in range(-1, 2):
                        for dj in range(-1, 2):
                            ni, nj = ci + di, cj + dj
                            if 0 <= ni < h and 0 <= nj < w and edges[ni, nj] == 0:
                                if mag[ni, nj] >= low and mag[ni, nj] > 0.0:
                                    edges[ni, nj] = 1
                                    stack[top, 0] = ni
                                    stack[top, 1] = nj
                                    top += 1
    return edges


def _hysteresis_numpy(mag, low, high):
    weak = (mag >= low) & (mag > 0)
    edges = (mag >= high) & weak
    while True:
        p = np.pad(edges, 1)
        grown = np.zeros_like(edges)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                grown |= p[1 + di:1 + di + edges.shape[0], 1 + dj:1 + dj + edges.shape[1]]
        grown &= weak
        if np.array_equal(grown | edges, edges):
            return edges.astype(np.uint8)
        edges = grown | edges


def _backend(backend):
    return backend or ("numba" if use_numba() else "numpy")


def canny(raster, sigma=CANNY_SIGMA, t_low=CANNY_LOW, t_high=CANNY_HIGH, backend=None):
    """Binary edge map.  Thresholds are fractions of the peak gradient."""
    if not 0 <= t_low < t_high:
        raise MetricError(f"need 0 <= t_low < t_high, got {t_low}, {t_high}")
    x = gaussian_blur(np.asarray(raster, dtype=np.float64), sigma)
    gx, gy = sobel(x)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(x.shape, dtype=np.uint8)
    tol = 1e-9 * peak
    bins = _direction_bins(gx, gy)
    if _backend(backend) == "numba":
        thin = _nms_loop(mag, bins, _NMS_STEP, tol)
        return _hysteresis_loop(thin, t_low * peak, t_high * peak)
    thin = _nms_numpy(mag, bins, _NMS_STEP, tol)
    return _hysteresis_numpy(thin, t_low * peak, t_high * peak)


# ------------------------------------------------------ distance transform


@njit(cache=True)
def _edt_1d(f, out, v, z):
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@njit(cache=True)
def _edt_sq_loop(edges, big):
    h, w = edges.shape
    f = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            f[i, j] = 0.0 if edges[i, j] else big
    n = max(h, w)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    buf = np.empty(n)
    col = np.empty(h)
    for j in range(w):
        for i in range(h):
            col[i] = f[i, j]
        _edt_1d(col, buf[:h], v, z)
        for i in range(h):
            f[i, j] = buf[i]
    row = np.empty(w)
    for i in range(h):
        for j in range(w):
            row[j] = f[i, j]
        _edt_1d(row, buf[:w], v, z)
        for j in range(w):
            f[i, j] = buf[j]
    return f


def _edt_sq_numpy(edges, big):
    h, w = edges.shape
    f = np.where(edges.astype(bool), 0.0, big)
    # column pass then row pass, each an exact min over the lower envelope
    idx_h = np.arange(h, dtype=np.float64)
    d2 = (idx_h[:, None] - idx_h[None, :]) ** 2
    g = (f[None, :, :] + d2[:, :, None]).min(axis=1)
    idx_w = np.arange(w, dtype=np.float64)
    d2 = (idx_w[:, None] - idx_w[None, :]) ** 2
    return (g[:, None, :] + d2[None, :, :]).min(axis=2)


def distance_field(edges, truncation=TRUNCATION, backend=None):
    """Euclidean distance to the nearest edge pixel, truncated.

    Computed exactly via squared distances (two separable passes); with no
    edge pixels every value is the truncation.
    """
    edges = np.asarray(edges).astype(np.uint8)
    if not edges.any():
        return np.full(edges.shape, float(truncation))
    if _backend(backend) == "numba":
        sq = _edt_sq_loop(edges, _BIG)
    else:
        sq = _edt_sq_numpy(edges, _BIG)
    return np.minimum(np.sqrt(sq), truncation)


# -------------------------------------------------------------------- PDBE


def _unit_range(x):
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def boundary_edges(depth, backend=None):
    """Union of Canny edges of normalised depth and normalised disparity."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise MetricError("PDBE needs positive depth")
    e_depth = canny(_unit_range(depth), backend=backend)
    e_disp = canny(_unit_range(1.0 / depth), backend=backend)
    return (e_depth | e_disp).astype(np.uint8)


@dataclass
class PDBEResult:
    acc: float
    compl: float
    gt_no_edges: bool = False
    pred_no_edges: bool = False

    def __iter__(self):
        return iter((self.acc, self.compl))


def pdbe(pred_depth, gt_depth, truncation=TRUNCATION, backend=None):
    """Boundary accuracy (mean distance from gt edges to predicted edges) and
    completeness (mean distance from predicted edges to gt edges).

    A ratio whose denominator edge map is empty is reported as 0 with the
    matching ``*_no_edges`` flag set.
    """
    e_pred = boundary_edges(pred_depth, backend)
    e_gt = boundary_edges(gt_depth, backend)
    t_pred = distance_field(e_pred, truncation, backend)
    t_gt = distance_field(e_gt, truncation, backend)
    n_gt, n_pred = e_gt.sum(), e_pred.sum()
    acc = float((t_pred * e_gt).sum() / n_gt) if n_gt else 0.0
    compl = float((t_gt * e_pred).sum() / n_pred) if n_pred else 0.0
    return PDBEResult(acc, compl, gt_no_edges=not n_gt, pred_no_edges=not n_pred)
