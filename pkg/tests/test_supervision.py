import numpy as np
import pytest

from patchgeo import numcore as nc
from patchgeo.supervision import (
    CameraModel, LossError, LossWeights, PseudoNormalField, depth_loss, loss_breakdown,
    normal_loss, pseudo_normals, total_loss,
)
from patchgeo.synthscene import SceneSpec, Sphere, default_camera, render
from patchgeo.patchgrid import ImageExtent
from helpers import unit_normals


def angles_deg(a, b):
    cos = np.clip((a * b).sum(0) / (np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0)), -1, 1)
    return np.degrees(np.arccos(cos))


def interior(mask, r=3):
    inner = np.zeros_like(mask)
    inner[r:-r, r:-r] = mask[r:-r, r:-r]
    return inner


def plane_depth_pinhole(cam, h, w, n, offset):
    # plane n . X = offset with X = depth * ray
    rays = cam.rays(h, w)
    return offset / (rays @ n)


def test_constant_depth_orthographic_is_fronto_parallel():
    f = pseudo_normals(np.full((16, 16), 4.0), CameraModel.orthographic())
    assert f.mask[2:-2, 2:-2].all() and not f.mask[0].any()
    np.testing.assert_allclose(f.normals[:, f.mask], np.array([[0], [0], [1.0]]) * np.ones(f.mask.sum()),
                               atol=1e-12)


@pytest.mark.parametrize("a,b", [(0.3, -0.2), (-1.5, 0.7), (0.05, 0.9)])
def test_orthographic_plane(a, b):
    v, u = np.mgrid[0:24, 0:24].astype(float)
    f = pseudo_normals(a * u + b * v + 60.0, CameraModel.orthographic())
    ref = np.array([-a, -b, 1.0]) / np.linalg.norm([-a, -b, 1.0])
    err = angles_deg(f.normals, ref[:, None, None] * np.ones((1, 24, 24)))
    assert err[interior(f.mask)].max() < 0.1


@pytest.mark.parametrize("seed", range(3))
def test_pinhole_plane(seed):
    rng = np.random.default_rng(seed)
    cam = CameraModel.pinhole(40.0, 40.0, 15.5, 15.5)
    n = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 1.0])
    n /= np.linalg.norm(n)
    d = plane_depth_pinhole(cam, 32, 32, n, 5.0)
    f = pseudo_normals(d, cam)
    # the camera-facing normal is -n in (u, v, depth); flipping all three axes
    # into the stored frame (x = -u, y = -v, z toward the camera) gives n
    ref = n
    err = angles_deg(f.normals, ref[:, None, None] * np.ones((1, 32, 32)))
    assert err[interior(f.mask)].max() < 0.1


def test_sphere_median_error_below_one_degree():
    ext = ImageExtent(96, 96)
    cam = default_camera(ext)
    spec = SceneSpec(cam, background_depth=9.0, primitives=[Sphere((0.0, 0.0, 5.0), 1.8)])
    frame = render(spec, ext)
    f = pseudo_normals(frame.depth, cam)
    err = angles_deg(f.normals, frame.normal)
    assert np.median(err[f.mask]) < 1.0


def test_rank_deficient_and_border_masked():
    d = np.full((12, 12), 3.0)
    f = pseudo_normals(d, CameraModel.orthographic(), window=5)
    assert not f.mask[:2].any() and not f.mask[:, -2:].any()
    np.testing.assert_array_equal(f.normals[:, 0, 0], [0, 0, 1])


def test_pseudo_normals_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        pseudo_normals(np.zeros((8, 8)), CameraModel.orthographic())


def depth_loss_loops(pred, gt, lam):
    h, w = gt.shape
    mse = sum((pred[i, j] - gt[i, j]) ** 2 for i in range(h) for j in range(w)) / (h * w)
    acc, n = 0.0, 0
    for i in range(h):
        for j in range(w - 1):
            acc += ((pred[i, j + 1] - gt[i, j + 1]) - (pred[i, j] - gt[i, j])) ** 2
            n += 1
    for i in range(h - 1):
        for j in range(w):
            acc += ((pred[i + 1, j] - gt[i + 1, j]) - (pred[i, j] - gt[i, j])) ** 2
            n += 1
    return mse + lam * acc / n


def test_depth_loss_cases():
    rng = np.random.default_rng(0)
    gt = rng.random((4, 4))
    assert depth_loss(gt, gt).item() == 0.0
    assert depth_loss(gt + 1.0, gt, grad_weight=0.5).item() == pytest.approx(1.0, abs=1e-15)
    pred = rng.random((4, 4))
    assert abs(depth_loss(pred, gt, 0.5).item() - depth_loss_loops(pred, gt, 0.5)) < 1e-12


def test_depth_loss_mask_and_empty_mask():
    gt = np.ones((4, 4))
    pred = gt.copy()
    pred[0, 0] = 100.0
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    assert depth_loss(pred, gt, 0.5, mask).item() == 0.0
    with pytest.raises(LossError):
        depth_loss(pred, gt, 0.5, np.zeros((4, 4), dtype=bool))


def normal_loss_loops(pred, ref, lam):
    _, h, w = ref.shape
    ang = mse = 0.0
    for i in range(h):
        for j in range(w):
            p = pred[:, i, j] / np.sqrt(sum(pred[c, i, j] ** 2 for c in range(3)))
            ang += 1.0 - sum(p[c] * ref[c, i, j] for c in range(3))
            mse += sum((pred[c, i, j] - ref[c, i, j]) ** 2 for c in range(3))
    return ang / (h * w) + lam * mse / (3 * h * w)


def test_normal_loss_cases():
    rng = np.random.default_rng(1)
    ref = unit_normals(rng, (1, 3, 5, 5))[0]
    assert normal_loss(ref, ref).item() == pytest.approx(0.0, abs=1e-15)
    assert normal_loss(-ref, ref, mse_weight=0).item() == pytest.approx(2.0, abs=1e-14)
    pred = unit_normals(rng, (1, 3, 5, 5))[0]
    assert abs(normal_loss(pred, ref).item() - normal_loss_loops(pred, ref, 1.0)) < 1e-12


def test_total_loss_modes_and_composite():
    rng = np.random.default_rng(2)
    gt = 3 + rng.random((8, 8))
    pred = gt + 0.1 * rng.normal(size=gt.shape)
    ref = unit_normals(rng, (1, 3, 8, 8))[0]
    npred = unit_normals(rng, (1, 3, 8, 8))[0]
    pseudo = PseudoNormalField(ref, np.ones((8, 8), dtype=bool))
    assert total_loss(gt, ref, gt, pseudo=pseudo).item() == pytest.approx(0.0, abs=1e-15)
    depth_only = total_loss(pred, npred, gt, weights=LossWeights(normal=0.0), pseudo=pseudo)
    assert depth_only.item() == depth_loss(pred, gt, 0.5).item()
    hand = depth_loss_loops(pred, gt, 0.5) + 0.01 * normal_loss_loops(npred, ref, 1.0)
    assert abs(total_loss(pred, npred, gt, pseudo=pseudo).item() - hand) < 1e-12
    total, terms = loss_breakdown(pred, npred, gt, pseudo=pseudo)
    assert set(terms) == {"depth", "normal"}


def test_total_loss_needs_camera_without_pseudo():
    with pytest.raises(LossError):
        total_loss(np.ones((8, 8)), np.ones((3, 8, 8)), np.ones((8, 8)))


def test_total_loss_gradients_pass_fd():
    rng = np.random.default_rng(3)
    gt = 3 + rng.random((6, 6))
    d = nc.parameter(gt + 0.2 * rng.normal(size=gt.shape), "d")
    n = nc.parameter(unit_normals(rng, (1, 3, 6, 6))[0] * 1.3, "n")
    pseudo = pseudo_normals(gt, CameraModel.orthographic(), window=3)
    weights = LossWeights(1.0, 0.5, 0.5, 1.0)
    f = lambda: total_loss(d, n, gt, weights=weights, pseudo=pseudo)  # noqa: E731
    assert nc.finite_difference_check(f, [d, n]) < 1e-4


def test_camera_params_roundtrip():
    cam = CameraModel.pinhole(50.0, 51.0, 10.5, 9.5)
    assert CameraModel.from_params(cam.to_params()) == cam
    with pytest.raises(ValueError):
        CameraModel("fisheye")
