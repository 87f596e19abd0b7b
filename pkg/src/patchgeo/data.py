"""Synthetic datasets: generation, persistence and reload."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .patchgrid import ImageExtent
from .supervision import CameraModel, PseudoNormalField, pseudo_normals
from .synthscene import DEFAULT_EXTENT, GeometryFrame, degrade, random_scene, render

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    id: str
    split: str
    frame: GeometryFrame
    coarse_depth: np.ndarray
    coarse_normal: np.ndarray
    _pseudo: PseudoNormalField | None = field(default=None, repr=False)

    @property
    def pseudo(self):
        """Pseudo-normals of the ground-truth depth (cached)."""
        if self._pseudo is None:
            self._pseudo = pseudo_normals(self.frame.depth, self.frame.camera)
        return self._pseudo


def split_counts(n):
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_of(index, n):
    n_train, n_val, _ = split_counts(n)
    if index < n_train:
        return "train"
    return "val" if index < n_train + n_val else "test"


def make_sample(seed, index, n, extent: ImageExtent = DEFAULT_EXTENT):
    rng = np.random.default_rng([seed, index])
    spec = random_scene(rng, extent)
    frame = render(spec, extent)
    coarse_d, coarse_n = degrade(frame, rng=rng)
    return Sample(f"{index:05d}", split_of(index, n), frame, coarse_d, coarse_n)


def generate(n, extent: ImageExtent = DEFAULT_EXTENT, seed=0):
    """``n`` deterministic samples; scene ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("dataset needs at least one scene")
    return [make_sample(seed, i, n, extent) for i in range(n)]


def _write(path, raster):
    try:
        fileio.write_pfm(path, raster)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def save_dataset(root, samples):
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    records = []
    for s in samples:
        rec = {"id": s.id, "split": s.split, "camera": s.frame.camera.to_params()}
        for key, raster in (("rgb", s.frame.rgb), ("depth", s.frame.depth),
                            ("normal", s.frame.normal), ("coarse_depth", s.coarse_depth),
                            ("coarse_normal", s.coarse_normal)):
            rel = f"frames/{s.id}_{key}.pfm"
            _write(os.path.join(root, rel), raster)
            rec[key] = rel
        records.append(rec)
    fileio.write_manifest(root, records)


def make_dataset(n, extent: ImageExtent = DEFAULT_EXTENT, seed=0, root=None):
    samples = generate(n, extent, seed)
    if root is not None:
        save_dataset(root, samples)
    return samples


def load_dataset(root, split=None, validate=True):
    samples = []
    for rec in fileio.read_manifest(root):
        if split is not None and rec["split"] != split:
            continue

        def load(key):
            path = os.path.join(root, rec[key])
            try:
                return fileio.read_pfm(path).astype(np.float64)
            except (OSError, fileio.PFMError) as exc:
                raise type(exc)(f"{path}: {exc}") from exc

        normal = load("normal")
        frame = GeometryFrame(load("rgb"), load("depth"), normal,
                              CameraModel.from_params(rec["camera"]))
        if validate:
            frame.validate(tol=1e-5)
        samples.append(Sample(rec["id"], rec["split"], frame, load("coarse_depth"),
                              load("coarse_normal")))
    return samples


def by_split(samples, split):
    return [s for s in samples if s.split == split]
