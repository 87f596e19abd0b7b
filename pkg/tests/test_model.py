import numpy as np
import pytest

from patchgeo import numcore as nc
from patchgeo.model import (
    Model, ModelConfig, ModelConfigError, _unshuffle, cells, cross_attention, init_params,
    intra_attention, predict_offsets, refine, rope_apply, rope_tables,
)
from patchgeo.patchgrid import ImageExtent, extract, grid_set, sample_grid
from helpers import unit_normals

CFG = ModelConfig(n_blocks=2, width=16, n_heads=2)


def random_params(cfg, seed):
    return init_params(cfg, np.random.default_rng(seed), identity=False)


def test_rope_identity_at_origin():
    x = np.random.default_rng(0).normal(size=(5, 12))
    assert np.array_equal(rope_apply(x, np.zeros((5, 2))).data, x)


def test_rope_preserves_pair_norms():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 16))
    y = rope_apply(x, rng.uniform(-500, 500, size=(7, 2))).data
    pairs = lambda a: np.hypot(a[:, 0::2], a[:, 1::2])  # noqa: E731
    np.testing.assert_allclose(pairs(y), pairs(x), rtol=0, atol=1e-12)


def test_rope_relative_shift_invariance():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q, k = rng.normal(size=(1, 12)), rng.normal(size=(1, 12))
        pq, pk, s = (rng.integers(-200, 200, size=(1, 2)).astype(float) for _ in range(3))
        a = (rope_apply(q, pq).data * rope_apply(k, pk).data).sum()
        b = (rope_apply(q, pq + s).data * rope_apply(k, pk + s).data).sum()
        assert abs(a - b) < 1e-9


def test_rope_axial_split():
    # a pure u shift leaves the v half untouched and vice versa
    x = np.random.default_rng(3).normal(size=(1, 8))
    yu = rope_apply(x, np.array([[3.0, 0.0]])).data
    yv = rope_apply(x, np.array([[0.0, 3.0]])).data
    np.testing.assert_array_equal(yu[:, 4:], x[:, 4:])
    np.testing.assert_array_equal(yv[:, :4], x[:, :4])


def test_rope_frequencies():
    cos, sin = rope_tables(np.array([[1.0, 0.0]]), 8)
    ang = np.arctan2(sin, cos)[0]
    np.testing.assert_allclose(ang[:2], [1.0, 10000 ** (-2 * 1 / 4)], rtol=1e-12)
    np.testing.assert_array_equal(ang[2:], 0.0)


def test_rope_needs_head_dim_multiple_of_four():
    with pytest.raises(ModelConfigError):
        rope_tables(np.zeros((1, 2)), 6)
    with pytest.raises(ModelConfigError):
        ModelConfig(width=12, n_heads=2)


def _tokens(seed, p=3, t=4, d=16):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(p, t, d)), rng.uniform(0, 64, size=(p, t, 2))


def test_intra_equals_block_diagonal_cross():
    for seed in range(5):
        params = random_params(CFG, seed)
        x, coords = _tokens(seed)
        p, t, _ = x.shape
        mask = np.kron(np.eye(p, dtype=bool), np.ones((t, t), dtype=bool))
        a = intra_attention(x, coords, params, "blocks.0.", CFG).data
        b = cross_attention(x, coords, params, "blocks.0.", CFG, mask=mask).data
        assert np.max(np.abs(a - b)) < 1e-9


def test_single_patch_cross_equals_intra_bitwise():
    params = random_params(CFG, 7)
    x, coords = _tokens(7, p=1)
    a = intra_attention(x, coords, params, "blocks.0.", CFG).data
    b = cross_attention(x, coords, params, "blocks.0.", CFG).data
    assert np.array_equal(a, b)


def test_cross_attention_mixes_patches():
    params = random_params(CFG, 8)
    x, coords = _tokens(8)
    base = cross_attention(x, coords, params, "blocks.0.", CFG).data
    x2 = x.copy()
    x2[2] += np.random.default_rng(9).normal(size=x2[2].shape)
    moved = cross_attention(x2, coords, params, "blocks.0.", CFG).data
    assert np.max(np.abs(base[0] - moved[0])) > 0
    intra = intra_attention(x2, coords, params, "blocks.0.", CFG).data
    np.testing.assert_array_equal(intra[0], intra_attention(x, coords, params, "blocks.0.", CFG).data[0])


def test_cells_and_unshuffle_are_inverse():
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 12))
    tok = cells(x, 4)
    assert tok.shape == (2, 6, 48)
    back = _unshuffle(nc.Tensor(tok), 2, 3, 3, 4).data
    np.testing.assert_array_equal(back, x)


def test_block_kinds():
    assert ModelConfig(n_blocks=4).block_kinds() == ["intra", "cross", "intra", "cross"]
    assert ModelConfig(n_blocks=3, cross_attention=False).block_kinds() == ["intra"] * 3


def test_zero_heads_give_identity():
    ext = ImageExtent(32, 32)
    rng = np.random.default_rng(0)
    model = Model.create(CFG, seed=3)
    ps = sample_grid(ext, 4, rng)
    rgb, cd = rng.random((3, 32, 32)), 2 + rng.random((32, 32))
    cn = unit_normals(rng, (1, 3, 32, 32))[0]
    d, n = model(extract(rgb, ps), extract(cd, ps), extract(cn, ps), ps)
    assert np.array_equal(d.data, extract(cd, ps))
    assert np.array_equal(n.data, extract(cn, ps))


def test_refine_adds_offsets_and_renormalizes():
    cd = np.full((1, 4, 4), 2.0)
    cn = np.zeros((1, 3, 4, 4))
    cn[:, 2] = 1.0
    off = np.zeros((1, 3, 4, 4))
    off[:, 0] = 1.0
    d, n = refine(cd, cn, np.ones((1, 4, 4)), off)
    np.testing.assert_array_equal(d.data, 3.0)
    np.testing.assert_allclose(n.data[:, :2], [[np.full((4, 4), 2 ** -0.5), np.zeros((4, 4))]])
    # an offset cancelling the normal falls back to the coarse normal
    d, n = refine(cd, cn, np.zeros((1, 4, 4)), -cn)
    np.testing.assert_array_equal(n.data, cn)


def test_heads_output_shapes():
    params = random_params(CFG, 1)
    feats = nc.Tensor(np.random.default_rng(0).normal(size=(2, 6, 16)))
    d, n = predict_offsets(feats, params, CFG, (8, 12))
    assert d.shape == (2, 8, 12) and n.shape == (2, 3, 8, 12)


def test_global_vs_local_coords_differ_only_for_offset_patches():
    ps = grid_set(ImageExtent(32, 32), (8, 0), 1, 2)
    g = Model.create(CFG).coords(ps)
    loc = Model.create(ModelConfig(n_blocks=2, width=16, n_heads=2, global_rope=False)).coords(ps)
    assert not np.array_equal(g, loc)
    np.testing.assert_array_equal(g - loc, np.broadcast_to([[[8, 0]], [[16, 0]]], g.shape))
