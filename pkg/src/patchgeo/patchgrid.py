"""Patch grid geometry: GridMix sampling, cropping, coordinates, reassembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATCH_DIVISOR = 4


class GridConfigError(ValueError):
    pass


class CoverageError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class ImageExtent:
    height: int
    width: int

    @property
    def patch_size(self):
        return self.height // PATCH_DIVISOR, self.width // PATCH_DIVISOR

    def validate(self, cell=1):
        for n in (self.height, self.width):
            if n % PATCH_DIVISOR or (n // PATCH_DIVISOR) % cell:
                raise GridConfigError(
                    f"extent {self.height}x{self.width} must split into 4x4 patches "
                    f"whose sides are multiples of the cell size {cell}"
                )
        return self


@dataclass(frozen=True)
class GridConfig:
    probs: tuple

    def __post_init__(self):
        p = tuple(float(x) for x in self.probs)
        object.__setattr__(self, "probs", p)
        if len(p) != 4:
            raise GridConfigError(f"need 4 grid probabilities, got {len(p)}")
        if any(x < 0 for x in p):
            raise GridConfigError(f"grid probabilities must be non-negative: {p}")
        if abs(sum(p) - 1.0) > 1e-9:
            raise GridConfigError(f"grid probabilities must sum to 1, got {sum(p):.12g}")


DEFAULT_GRID = GridConfig((0.1, 0.2, 0.3, 0.4))


@dataclass(frozen=True)
class PatchSpec:
    index: int
    x: int
    y: int
    h: int
    w: int

    @property
    def window(self):
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)


@dataclass(frozen=True)
class PatchSet:
    """Patches of one fixed size inside ``extent``.

    ``rows`` x ``cols`` gives the grid layout (row-major patch order).  For a
    GridMix sample ``rows == cols == m``.
    """

    extent: ImageExtent
    patches: tuple
    rows: int
    cols: int

    @property
    def m(self):
        return self.rows if self.rows == self.cols else None

    @property
    def patch_size(self):
        p = self.patches[0]
        return p.h, p.w

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    @property
    def origins(self):
        return np.array([(p.x, p.y) for p in self.patches], dtype=np.int64)


def choose_config(cfg: GridConfig, rng: np.random.Generator) -> int:
    """Draw the grid side M in {1,2,3,4} with probability ``cfg.probs[M-1]``."""
    u = rng.random()
    acc = 0.0
    for m, p in enumerate(cfg.probs, start=1):
        acc += p
        if u < acc:
            return m
    # u landed in the rounding gap above the last positive bin
    return max(m for m, p in enumerate(cfg.probs, start=1) if p > 0)


def grid_set(extent, origin, m_rows, m_cols, patch_size=None):
    ph, pw = patch_size or extent.patch_size
    x0, y0 = origin
    patches = []
    for i in range(m_rows):
        for j in range(m_cols):
            patches.append(PatchSpec(len(patches), x0 + j * pw, y0 + i * ph, ph, pw))
    return PatchSet(extent, tuple(patches), m_rows, m_cols)


def sample_grid(extent: ImageExtent, m: int, rng: np.random.Generator, align=1) -> PatchSet:
    """Random M x M contiguous grid that lies fully inside the image.

    The shared origin is uniform over positions that are multiples of
    ``align`` (the model cell size) within the containment range.  M=4 always
    sits at the origin and tiles the image.
    """
    if m not in (1, 2, 3, 4):
        raise GridConfigError(f"grid side must be in 1..4, got {m}")
    ph, pw = extent.patch_size
    if m == PATCH_DIVISOR:
        return grid_set(extent, (0, 0), m, m)
    max_x = extent.width - m * pw
    max_y = extent.height - m * ph
    x0 = int(rng.integers(0, max_x // align + 1)) * align
    y0 = int(rng.integers(0, max_y // align + 1)) * align
    return grid_set(extent, (x0, y0), m, m)


def _starts(total, size, stride):
    if size > total:
        raise GridConfigError(f"patch size {size} exceeds extent {total}")
    starts = list(range(0, total - size + 1, stride))
    if starts[-1] != total - size:
        starts.append(total - size)
    return starts


def cover(extent: ImageExtent, patch_size, stride) -> PatchSet:
    """Tiles of ``patch_size`` at ``stride``; the last row/column is pushed
    flush with the border so the whole extent is covered."""
    ph, pw = patch_size
    sy, sx = (stride, stride) if np.isscalar(stride) else stride
    ys = _starts(extent.height, ph, sy)
    xs = _starts(extent.width, pw, sx)
    patches = []
    for y in ys:
        for x in xs:
            patches.append(PatchSpec(len(patches), x, y, ph, pw))
    return PatchSet(extent, tuple(patches), len(ys), len(xs))


def extract(raster, pset: PatchSet):
    """Stack the exact windows of ``raster`` (``[..., H, W]``) for each patch."""
    raster = np.asarray(raster)
    if raster.shape[-2:] != (pset.extent.height, pset.extent.width):
        raise AlignmentError(
            f"raster extent {raster.shape[-2:]} does not match patch set extent "
            f"{(pset.extent.height, pset.extent.width)}"
        )
    return np.stack([raster[(Ellipsis,) + p.window] for p in pset.patches])


def extract_frame(frame, coarse_depth, coarse_normal, pset: PatchSet):
    """Per-patch ``(rgb, coarse depth, coarse normal)`` crops."""
    return (
        extract(frame.rgb, pset),
        extract(coarse_depth, pset),
        extract(coarse_normal, pset),
    )


def global_coords(spec: PatchSpec, local):
    """Local in-patch pixel coordinates ``(u, v)`` to source-image coordinates."""
    local = np.asarray(local, dtype=np.int64)
    return local + np.array([spec.x, spec.y], dtype=np.int64)


def token_coords(pset: PatchSet, cell, global_frame=True):
    """Per-token ``(u, v)`` at each cell's top-left pixel, shape ``[P, T, 2]``.

    With ``global_frame=False`` the patch origin is dropped (local coords).
    """
    ph, pw = pset.patch_size
    vv, uu = np.meshgrid(np.arange(0, ph, cell), np.arange(0, pw, cell), indexing="ij")
    local = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    if not global_frame:
        return np.broadcast_to(local, (len(pset),) + local.shape).copy()
    return np.stack([global_coords(p, local) for p in pset.patches])


def assemble(pset: PatchSet, maps):
    """Write per-patch maps (``[P, ..., h, w]``) back into the full extent.

    Overlapping pixels are averaged with uniform weights, accumulated in
    patch-index order.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.shape[0] != len(pset) or maps.shape[-2:] != pset.patch_size:
        raise AlignmentError(
            f"expected {len(pset)} maps of size {pset.patch_size}, got {maps.shape}"
        )
    lead = maps.shape[1:-2]
    acc = np.zeros(lead + (pset.extent.height, pset.extent.width))
    count = np.zeros((pset.extent.height, pset.extent.width))
    for p, m in zip(pset.patches, maps):
        acc[(Ellipsis,) + p.window] += m
        count[p.window] += 1
    holes = np.argwhere(count == 0)
    if len(holes):
        shown = ", ".join(f"({r},{c})" for r, c in holes[:8])
        more = f" and {len(holes) - 8} more" if len(holes) > 8 else ""
        raise CoverageError(f"{len(holes)} uncovered pixels: {shown}{more}")
    return acc / count
