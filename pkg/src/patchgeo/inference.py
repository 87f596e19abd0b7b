"""Tiled inference at any resolution and the evaluation driver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import MetricReport, ce_band, consistency_error, depth_metrics, normal_metrics, pdbe
from .model import Model
from .numcore import unit_vectors
from .patchgrid import ImageExtent, PatchSet, assemble, cover, extract


class ResolutionError(ValueError):
    pass


@dataclass
class InferenceResult:
    depth: np.ndarray  # [H, W]
    normal: np.ndarray  # [3, H, W]
    patch_depth: np.ndarray  # [P, h, w] per-tile refined depth before fusion
    pset: PatchSet
    banded: bool = False
    n_bands: int = 1


def _bands(pset: PatchSet, tokens_per_patch, budget):
    """Groups of whole cover rows whose token count fits ``budget``."""
    per_row = pset.cols * tokens_per_patch
    if budget is None or pset.rows * per_row <= budget:
        return [list(range(len(pset)))]
    rows_per_band = max(1, budget // per_row)
    groups = []
    for r0 in range(0, pset.rows, rows_per_band):
        r1 = min(pset.rows, r0 + rows_per_band)
        groups.append(list(range(r0 * pset.cols, r1 * pset.cols)))
    return groups


def _subset(pset: PatchSet, idx):
    patches = tuple(pset.patches[i] for i in idx)
    return PatchSet(pset.extent, patches, len(idx) // pset.cols, pset.cols)


def infer(model: Model, rgb, coarse_depth, coarse_normal, patch_size, stride=None,
          token_budget=None) -> InferenceResult:
    """Refine a full frame by tiling it with ``patch_size`` windows.

    Every tile of the cover goes through one forward pass (cross-patch
    attention spans the whole cover) unless the token count exceeds
    ``token_budget``; then rows of tiles are processed in bands that share the
    global coordinate frame, and the result is flagged ``banded``.
    """
    coarse_depth = np.asarray(coarse_depth, dtype=np.float64)
    h, w = coarse_depth.shape
    ph, pw = patch_size
    c = model.cfg.cell
    if h % c or w % c:
        raise ResolutionError(
            f"extent {h}x{w} is not divisible by the cell size {c}; pad to "
            f"{-(-h // c) * c}x{-(-w // c) * c}"
        )
    if h < ph or w < pw:
        raise ResolutionError(f"extent {h}x{w} is smaller than the patch {ph}x{pw}")
    stride = stride or (ph, pw)
    pset = cover(ImageExtent(h, w), (ph, pw), stride)
    tokens = (ph // c) * (pw // c)
    groups = _bands(pset, tokens, token_budget)
    depth_tiles = np.zeros((len(pset), ph, pw))
    normal_tiles = np.zeros((len(pset), 3, ph, pw))
    for idx in groups:
        sub = _subset(pset, idx)
        d, n = model(extract(rgb, sub), extract(coarse_depth, sub),
                     extract(coarse_normal, sub), sub)
        depth_tiles[idx] = d.data
        normal_tiles[idx] = n.data
    depth = assemble(pset, depth_tiles)
    normal = assemble(pset, normal_tiles)
    normal = unit_vectors(normal, axis=0, fallback=coarse_normal)[0]
    return InferenceResult(depth, normal, depth_tiles, pset, len(groups) > 1, len(groups))


def frame_report(pred_depth, pred_normal, sample, ce=float("nan")):
    """Metrics of one predicted frame against its ground truth."""
    gt = sample.frame
    absrel, delta1, rmse = depth_metrics(pred_depth, gt.depth)
    normals = normal_metrics(pred_normal, gt.normal)
    boundary = pdbe(np.maximum(pred_depth, 1e-6), gt.depth)
    return MetricReport(absrel, delta1, rmse, ce, boundary.acc, boundary.compl, **normals)


def overlap_stride(patch_size):
    """Cover stride that leaves exactly one CE band of overlap."""
    ph, pw = patch_size
    b = ce_band(ph)
    return max(1, ph - b), max(1, pw - b), b


def evaluate_sample(model: Model, sample, patch_size, token_budget=None):
    res = infer(model, sample.frame.rgb, sample.coarse_depth, sample.coarse_normal,
                patch_size, token_budget=token_budget)
    sy, sx, band = overlap_stride(patch_size)
    second = infer(model, sample.frame.rgb, sample.coarse_depth, sample.coarse_normal,
                   patch_size, stride=(sy, sx), token_budget=token_budget)
    ce = consistency_error(second.patch_depth, second.pset, band)
    return frame_report(res.depth, res.normal, sample, ce)


def evaluate(model: Model, samples, patch_size, token_budget=None):
    """Unweighted mean of per-frame reports."""
    samples = list(samples)
    if not samples:
        raise ValueError("evaluation split is empty")
    return MetricReport.mean(evaluate_sample(model, s, patch_size, token_budget) for s in samples)


def evaluate_coarse(samples, patch_size):
    """Baseline row: the coarse inputs scored as predictions."""
    reports = []
    sy, sx, band = overlap_stride(patch_size)
    for s in samples:
        pset = cover(s.frame.extent, patch_size, (sy, sx))
        ce = consistency_error(extract(s.coarse_depth, pset), pset, band)
        reports.append(frame_report(s.coarse_depth, s.coarse_normal, s, ce))
    return MetricReport.mean(reports)
