"""Multi-patch geometry transformer.

Tokens are c x c pixel cells.  Each cell of the rgb crop, the coarse depth
crop and the coarse normal crop is linearly embedded and the three token
grids are summed.  Blocks alternate intra-patch and cross-patch attention
with 2D rotary encoding on global pixel coordinates, and two linear heads
turn the final tokens back into per-pixel depth and normal offsets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .patchgrid import PatchSet, token_coords

ROPE_BASE = 10_000.0
INIT_STD = 0.02


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    width: int = 48
    n_heads: int = 4
    cell: int = 4
    mlp_ratio: int = 2
    cross_attention: bool = True
    global_rope: bool = True

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ModelConfigError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.head_dim % 4:
            raise ModelConfigError(
                f"head width {self.head_dim} must be a multiple of 4 for axial 2D RoPE"
            )
        if self.n_blocks < 0 or self.cell < 1:
            raise ModelConfigError("n_blocks must be >= 0 and cell >= 1")

    @property
    def head_dim(self):
        return self.width // self.n_heads

    def block_kinds(self):
        if not self.cross_attention:
            return ["intra"] * self.n_blocks
        return ["intra" if i % 2 == 0 else "cross" for i in range(self.n_blocks)]

    def to_dict(self):
        return asdict(self)


def _trunc_normal(rng, shape, std=INIT_STD):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def param_shapes(cfg: ModelConfig):
    """Ordered ``{name: shape}`` for every trainable tensor."""
    d, c2 = cfg.width, cfg.cell * cfg.cell
    hidden = cfg.mlp_ratio * d
    shapes = {
        "embed.rgb.w": (3 * c2, d),
        "embed.rgb.b": (d,),
        "embed.depth.w": (c2, d),
        "embed.depth.b": (d,),
        "embed.normal.w": (3 * c2, d),
        "embed.normal.b": (d,),
    }
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.q.w": (d, d),
                p + "attn.q.b": (d,),
                p + "attn.k.w": (d, d),
                p + "attn.k.b": (d,),
                p + "attn.v.w": (d, d),
                p + "attn.v.b": (d,),
                p + "attn.out.w": (d, d),
                p + "attn.out.b": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "mlp.fc1.w": (d, hidden),
                p + "mlp.fc1.b": (hidden,),
                p + "mlp.fc2.w": (hidden, d),
                p + "mlp.fc2.b": (d,),
            }
        )
    shapes.update(
        {
            "head.depth.w": (d, c2),
            "head.depth.b": (c2,),
            "head.normal.w": (d, 3 * c2),
            "head.normal.b": (3 * c2,),
        }
    )
    return shapes


_ZERO_INIT = ("attn.out.w", "mlp.fc2.w", "head.depth.w", "head.normal.w")


def init_params(cfg: ModelConfig, rng: np.random.Generator, identity=True):
    """Fresh parameters.

    With ``identity=True`` every residual output projection and both heads
    start at zero, so the untrained model returns the coarse input unchanged.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        elif identity and name.endswith(_ZERO_INIT):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = nc.parameter(data, name)
    return params


def cells(x, cell):
    """``[P, C, h, w]`` -> ``[P, T, C*cell*cell]`` with cells in row-major order."""
    p, ch, h, w = x.shape
    if h % cell or w % cell:
        raise ModelConfigError(f"crop {h}x{w} is not divisible by cell size {cell}")
    x = x.reshape(p, ch, h // cell, cell, w // cell, cell)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(p, (h // cell) * (w // cell), ch * cell * cell)


def embed_patch(rgb, depth, normal, params, cfg: ModelConfig):
    """Joint tokens ``T_rgb + T_depth + T_normal``, shape ``[P, T, d]``."""
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[:, None]
    c = cfg.cell
    t_rgb = nc.matmul(cells(rgb, c), params["embed.rgb.w"]) + params["embed.rgb.b"]
    t_depth = nc.matmul(cells(depth, c), params["embed.depth.w"]) + params["embed.depth.b"]
    t_normal = nc.matmul(cells(normal, c), params["embed.normal.w"]) + params["embed.normal.b"]
    return t_rgb + t_depth + t_normal


def rope_tables(coords, head_dim, base=ROPE_BASE):
    """cos/sin tables ``[..., head_dim/2]`` for axial 2D RoPE.

    The first half of the channels rotate with u, the second half with v;
    each half holds ``head_dim/4`` pairs with frequencies
    ``base ** (-2j / (head_dim/2))``.
    """
    if head_dim % 4:
        raise ModelConfigError(f"axial RoPE needs head width divisible by 4, got {head_dim}")
    half = head_dim // 2
    freqs = base ** (-2.0 * np.arange(half // 2) / half)
    coords = np.asarray(coords, dtype=np.float64)
    ang = np.concatenate(
        [coords[..., 0:1] * freqs, coords[..., 1:2] * freqs], axis=-1
    )
    return np.cos(ang), np.sin(ang)


def rope_apply(x, coords, base=ROPE_BASE):
    """Rotate query/key vectors ``[..., N, d_h]`` by positions ``[..., N, 2]``."""
    x = nc.as_tensor(x)
    cos, sin = rope_tables(coords, x.shape[-1], base)
    return nc.rotate_pairs(x, cos, sin)


def _heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def attention(x, coords, params, prefix, cfg: ModelConfig, mask=None):
    """Multi-head RoPE self-attention over ``[B, N, d]`` with residual add.

    ``coords`` is ``[B, N, 2]``.  ``mask`` (``[N, N]`` bool) restricts which
    keys each query sees.
    """
    x = nc.as_tensor(x)
    b, n, d = x.shape
    h = nc.layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    q = _heads(h @ params[prefix + "attn.q.w"] + params[prefix + "attn.q.b"], cfg.n_heads)
    k = _heads(h @ params[prefix + "attn.k.w"] + params[prefix + "attn.k.b"], cfg.n_heads)
    v = _heads(h @ params[prefix + "attn.v.w"] + params[prefix + "attn.v.b"], cfg.n_heads)
    cos, sin = rope_tables(coords[:, None], cfg.head_dim)
    q = nc.rotate_pairs(q, cos, sin)
    k = nc.rotate_pairs(k, cos, sin)
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(cfg.head_dim))
    weights = nc.softmax_rows(logits, mask=mask)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return x + (out @ params[prefix + "attn.out.w"] + params[prefix + "attn.out.b"])


def intra_attention(tokens, coords, params, prefix, cfg):
    """Attention restricted to each patch's own tokens (``[P, T, d]``)."""
    return attention(tokens, coords, params, prefix, cfg)


def cross_attention(tokens, coords, params, prefix, cfg, mask=None):
    """Attention over the concatenation of every patch's tokens."""
    tokens = nc.as_tensor(tokens)
    p, t, d = tokens.shape
    flat = attention(
        tokens.reshape(1, p * t, d), coords.reshape(1, p * t, 2), params, prefix, cfg, mask
    )
    return flat.reshape(p, t, d)


def mlp(x, params, prefix):
    x = nc.as_tensor(x)
    h = nc.layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    h = nc.gelu(h @ params[prefix + "mlp.fc1.w"] + params[prefix + "mlp.fc1.b"])
    return x + (h @ params[prefix + "mlp.fc2.w"] + params[prefix + "mlp.fc2.b"])


def forward(tokens, coords, params, cfg: ModelConfig):
    """Run the block stack on ``[P, T, d]`` tokens with ``[P, T, 2]`` coords."""
    x = tokens
    for i, kind in enumerate(cfg.block_kinds()):
        prefix = f"blocks.{i}."
        if kind == "intra":
            x = intra_attention(x, coords, params, prefix, cfg)
        else:
            x = cross_attention(x, coords, params, prefix, cfg)
        x = mlp(x, params, prefix)
    return x


def _unshuffle(x, grid_h, grid_w, channels, cell):
    # [P, T, C*c*c] -> [P, C, grid_h*c, grid_w*c]
    p = x.shape[0]
    x = x.reshape(p, grid_h, grid_w, channels, cell, cell)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(p, channels, grid_h * cell, grid_w * cell)


def predict_offsets(features, params, cfg: ModelConfig, patch_size):
    """Depth offsets ``[P, h, w]`` and normal offsets ``[P, 3, h, w]``."""
    h, w = patch_size
    c = cfg.cell
    gh, gw = h // c, w // c
    d_off = features @ params["head.depth.w"] + params["head.depth.b"]
    n_off = features @ params["head.normal.w"] + params["head.normal.b"]
    d_map = _unshuffle(d_off, gh, gw, 1, c)
    return d_map.reshape(d_map.shape[0], h, w), _unshuffle(n_off, gh, gw, 3, c)


def refine(coarse_depth, coarse_normal, depth_offset, normal_offset, floor=1e-8):
    """Add offsets; refined normals are renormalised per pixel (channel axis
    ``-3``), falling back to the coarse normal where the sum vanishes."""
    depth = nc.as_tensor(coarse_depth) + depth_offset
    raw = nc.as_tensor(coarse_normal) + normal_offset
    normal = nc.normalize(raw, axis=-3, floor=floor, fallback=np.asarray(coarse_normal))
    return depth, normal


class Model:
    """Parameters plus the configuration needed to run them."""

    def __init__(self, cfg: ModelConfig, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed=0, identity=True):
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), identity))

    def coords(self, pset: PatchSet):
        return token_coords(pset, self.cfg.cell, global_frame=self.cfg.global_rope)

    def __call__(self, rgb, coarse_depth, coarse_normal, pset: PatchSet):
        """Refined ``(depth [P,h,w], normal [P,3,h,w])`` for the crops of ``pset``."""
        tokens = embed_patch(rgb, coarse_depth, coarse_normal, self.params, self.cfg)
        feats = forward(tokens, self.coords(pset), self.params, self.cfg)
        d_off, n_off = predict_offsets(feats, self.params, self.cfg, pset.patch_size)
        return refine(coarse_depth, coarse_normal, d_off, n_off)
