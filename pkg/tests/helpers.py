"""Shared fixtures-by-function and brute-force oracles for the unit and
acceptance suites."""

import math

import numpy as np

from patchgeo import numcore as nc
from patchgeo.model import Model, ModelConfig
from patchgeo.patchgrid import ImageExtent, grid_set
from patchgeo.supervision import LossWeights, PseudoNormalField, total_loss


def unit_normals(rng, shape):
    n = rng.normal(size=shape)
    n[:, 2] = np.abs(n[:, 2]) + 1.0
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _probe(out, rng):
    # A fixed random weighting turns any output into a scalar with generic gradients.
    w = rng.normal(size=out.shape)
    return (out * w).sum()


def primitive_cases(rng):
    """``{primitive name: (params, f)}`` with randomized 64-bit inputs."""
    P = nc.parameter
    cases = {}

    a, b = P(rng.normal(size=(3, 4)), "a"), P(rng.normal(size=(4,)), "b")
    for name in ("add", "sub", "mul"):
        prim = nc.PRIMITIVES[name]
        w = rng.normal(size=(3, 4))
        cases[name] = ([a, b], lambda prim=prim, w=w: (prim(a, b) * w).sum())

    num = P(rng.normal(size=(3, 4)), "num")
    den = P(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)), "den")
    wd = rng.normal(size=(3, 4))
    cases["div"] = ([num, den], lambda: (nc.div(num, den) * wd).sum())

    x = P(rng.normal(size=(2, 5)), "x")
    ws = rng.normal(size=(2, 5))
    cases["square"] = ([x], lambda: (nc.square(x) * ws).sum())

    pos = P(rng.uniform(0.5, 3.0, size=(2, 5)), "pos")
    wq = rng.normal(size=(2, 5))
    cases["sqrt"] = ([pos], lambda: (nc.sqrt(pos) * wq).sum())

    ma, mb = P(rng.normal(size=(2, 3, 4)), "ma"), P(rng.normal(size=(4, 5)), "mb")
    wm = rng.normal(size=(2, 3, 5))
    cases["matmul"] = ([ma, mb], lambda: (nc.matmul(ma, mb) * wm).sum())

    r = P(rng.normal(size=(2, 6)), "r")
    wr = rng.normal(size=(3, 4))
    cases["reshape"] = ([r], lambda: (nc.reshape(r, (3, 4)) * wr).sum())

    t = P(rng.normal(size=(2, 3, 4)), "t")
    wt = rng.normal(size=(4, 2, 3))
    cases["transpose"] = ([t], lambda: (nc.transpose(t, (2, 0, 1)) * wt).sum())

    g = P(rng.normal(size=(4, 5)), "g")
    wg = rng.normal(size=(3, 5))
    cases["getitem"] = ([g], lambda: (g[np.array([0, 2, 2])] * wg).sum())

    s = P(rng.normal(size=(3, 4)), "s")
    wsum = rng.normal(size=(1, 4))
    cases["sum"] = ([s], lambda: (nc.tsum(s, axis=0, keepdims=True) * wsum).sum())

    c1, c2 = P(rng.normal(size=(2, 3)), "c1"), P(rng.normal(size=(2, 2)), "c2")
    wc = rng.normal(size=(2, 5))
    cases["concat"] = ([c1, c2], lambda: (nc.concat([c1, c2], axis=1) * wc).sum())

    lg = P(rng.normal(size=(2, 4, 4)), "logits")
    mask = np.tril(np.ones((4, 4), dtype=bool))
    wsm = rng.normal(size=(2, 4, 4))
    cases["softmax"] = ([lg], lambda: (nc.softmax_rows(lg, mask=mask) * wsm).sum())

    lx = P(rng.normal(size=(3, 6)), "ln.x")
    gain, bias = P(1.0 + 0.1 * rng.normal(size=6), "ln.g"), P(0.1 * rng.normal(size=6), "ln.b")
    wl = rng.normal(size=(3, 6))
    cases["layer_norm"] = ([lx, gain, bias], lambda: (nc.layer_norm(lx, gain, bias) * wl).sum())

    gx = P(rng.normal(size=(3, 4)), "gelu.x")
    wgl = rng.normal(size=(3, 4))
    cases["gelu"] = ([gx], lambda: (nc.gelu(gx) * wgl).sum())

    rx = P(rng.normal(size=(5, 8)), "rot.x")
    ang = rng.uniform(-np.pi, np.pi, size=(5, 4))
    wro = rng.normal(size=(5, 8))
    cases["rotate_pairs"] = (
        [rx], lambda: (nc.rotate_pairs(rx, np.cos(ang), np.sin(ang)) * wro).sum()
    )

    nx = P(rng.normal(size=(2, 3, 4)) + 0.5, "norm.x")
    wn = rng.normal(size=(2, 3, 4))
    cases["normalize"] = ([nx], lambda: (nc.normalize(nx, axis=1) * wn).sum())
    return cases


FD_CONFIG = ModelConfig(n_blocks=2, width=16, n_heads=2, cell=4, mlp_ratio=2)


def end_to_end_instance(seed):
    """P=2 patches of T=4 tokens, width 16, two blocks, randomized weights.

    Weights use a 1/sqrt(fan_in) scale rather than the training init so
    attention logits are not near-degenerate; that keeps every gradient entry
    well above the central-difference noise floor at h=1e-5.
    """
    rng = np.random.default_rng(seed)
    model = Model.create(FD_CONFIG, seed=seed, identity=False)
    for k, p in model.params.items():
        std = 1.0 / np.sqrt(p.shape[0]) if p.ndim == 2 else 0.1
        if k.startswith("head."):
            std *= 0.1
        p.data[...] = rng.normal(0.0, std, p.shape) + (1.0 if k.endswith(".g") else 0.0)
    pset = grid_set(ImageExtent(32, 32), (8, 8), 1, 2)
    rgb = rng.random((2, 3, 8, 8))
    cd = 3.0 + rng.random((2, 8, 8))
    cn = unit_normals(rng, (2, 3, 8, 8))
    gt = cd + 0.1 * rng.normal(size=cd.shape)
    pn = cn + 0.2 * rng.normal(size=cn.shape)
    pn /= np.linalg.norm(pn, axis=1, keepdims=True)
    pseudo = PseudoNormalField(pn, np.ones((2, 8, 8), dtype=bool))
    weights = LossWeights(1.0, 0.5, 0.5, 1.0)

    def f():
        d, n = model(rgb, cd, cn, pset)
        return total_loss(d, n, gt, weights=weights, pseudo=pseudo)

    return model, f, rng


# ---------------------------------------------------------------- oracles

def depth_metrics_loops(pred, gt):
    h, w = gt.shape
    n = h * w
    absrel = sq = good = 0.0
    for i in range(h):
        for j in range(w):
            p, g = pred[i, j], gt[i, j]
            absrel += abs(p - g) / g
            sq += (p - g) ** 2
            good += max(p / g, g / p) < 1.25
    return absrel / n, good / n, math.sqrt(sq / n)


def normal_angles_loops(pred, gt):
    _, h, w = gt.shape
    out = []
    for i in range(h):
        for j in range(w):
            c = sum(pred[k, i, j] * gt[k, i, j] for k in range(3))
            out.append(math.degrees(math.acos(min(1.0, max(-1.0, c)))))
    return np.array(out)


def ce_loops(preds, pset, band):
    """Per-pixel membership test for each pair's band, straight from the
    definition: central ``band`` columns/rows of the two tiles' overlap."""
    ph, pw = pset.patch_size
    errs = []
    for i in range(pset.rows):
        for j in range(pset.cols):
            k = i * pset.cols + j
            for nb, horiz in ((k + 1, True), (k + pset.cols, False)):
                if (horiz and j + 1 >= pset.cols) or (not horiz and i + 1 >= pset.rows):
                    continue
                a, b = pset.patches[k], pset.patches[nb]
                if horiz:
                    lo, hi = b.x, a.x + pw
                else:
                    lo, hi = b.y, a.y + ph
                start = lo + (hi - lo - band) // 2
                total, count = 0.0, 0
                for y in range(max(a.y, b.y), min(a.y, b.y) + ph):
                    for x in range(max(a.x, b.x), min(a.x, b.x) + pw):
                        t = x if horiz else y
                        if start <= t < start + band:
                            total += abs(preds[k, y - a.y, x - a.x] - preds[nb, y - b.y, x - b.x])
                            count += 1
                errs.append(total / count)
    return sum(errs) / len(errs)


def edt_brute(edges, trunc=10.0):
    pts = np.argwhere(edges)
    h, w = edges.shape
    out = np.full((h, w), trunc)
    for i in range(h):
        for j in range(w):
            if len(pts):
                out[i, j] = min(trunc, math.sqrt(min((i - a) ** 2 + (j - b) ** 2 for a, b in pts)))
    return out
