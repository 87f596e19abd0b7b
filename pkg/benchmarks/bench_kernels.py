"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--size 96] [--repeat 5]

Each row reports the best-of-``repeat`` wall time per call after one warm-up
call (the warm-up absorbs JIT compilation).  Outputs of the two paths are
compared on every kernel before timing.
"""

import argparse
import time

import numpy as np

from patchgeo import _accel
from patchgeo.metrics import canny, distance_field
from patchgeo.patchgrid import ImageExtent
from patchgeo.supervision import pseudo_normals
from patchgeo.synthscene import default_camera, random_scene, render


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba unavailable (or PATCHGEO_DISABLE_NUMBA set); nothing to compare")

    ext = ImageExtent(args.size, args.size)
    spec = random_scene(np.random.default_rng(0), ext)
    frame = render(spec, ext)
    cam = default_camera(ext)
    unit = (frame.depth - frame.depth.min()) / np.ptp(frame.depth)
    edges = canny(unit)

    kernels = {
        "render": lambda b: render(spec, ext, backend=b).depth,
        "pseudo_normals": lambda b: pseudo_normals(frame.depth, cam, backend=b).normals,
        "canny": lambda b: canny(unit, backend=b),
        "distance_field": lambda b: distance_field(edges, backend=b),
    }
    print(f"{'kernel':<16}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}  max |diff|")
    for name, run in kernels.items():
        diff = np.max(np.abs(run("numba").astype(float) - run("numpy").astype(float)))
        t_nb = best_of(lambda: run("numba"), args.repeat)
        t_np = best_of(lambda: run("numpy"), args.repeat)
        print(f"{name:<16}{1e3 * t_nb:>11.2f}{1e3 * t_np:>11.2f}{t_np / t_nb:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
