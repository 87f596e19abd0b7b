"""Training configuration, optimizer and loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import fileio
from . import numcore as nc
from .model import Model, ModelConfig
from .patchgrid import GridConfig, ImageExtent, choose_config, extract, sample_grid
from .supervision import LossWeights, PseudoNormalField, loss_breakdown

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    grid_probs: tuple = (0.1, 0.2, 0.3, 0.4)
    lr: float = 1e-3
    lr_schedule: str = "constant"
    weight_decay: float = 1e-6
    clip_norm: float = 35.0
    iterations: int = 2000
    seed: int = 0
    lambda_depth: float = 1.0
    lambda_normal: float = 0.01
    lambda_grad: float = 0.5
    lambda_mse: float = 1.0
    n_blocks: int = 4
    width: int = 48
    n_heads: int = 4
    cell: int = 4
    mlp_ratio: int = 2
    cross_attention: bool = True
    global_rope: bool = True
    dataset: str = ""
    checkpoint_every: int = 0
    token_budget: int = 4096

    def validate(self):
        try:
            GridConfig(self.grid_probs)
            self.model_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {', '.join(LR_SCHEDULES)}")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.iterations < 0 or self.checkpoint_every < 0:
            raise ConfigError("iterations and checkpoint_every must be non-negative")
        return self

    def model_config(self):
        return ModelConfig(self.n_blocks, self.width, self.n_heads, self.cell, self.mlp_ratio,
                           self.cross_attention, self.global_rope)

    def loss_weights(self):
        return LossWeights(self.lambda_depth, self.lambda_normal, self.lambda_grad,
                           self.lambda_mse)

    def to_text(self):
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, known[key].default, raw)
        return cls(**kwargs).validate()

    @classmethod
    def from_text(cls, text, source="<config>"):
        try:
            values = fileio.parse_key_values(text, source)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls.from_mapping(values)


def _coerce(key, default, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace("(", "").replace(")", "").split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


LR_SCHEDULES = ("constant", "cosine")


def learning_rate(cfg: TrainConfig, it):
    """Step size for iteration ``it`` (0-based).  ``cosine`` anneals from
    ``cfg.lr`` towards zero over ``cfg.iterations`` steps."""
    if cfg.lr_schedule == "constant" or cfg.iterations == 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * it / cfg.iterations))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def state(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state):
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
        self.t = int(state["t"])


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint l2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before, norm_after)``.
    """
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm:
        return grads, norm, norm
    scale = max_norm / norm
    clipped = {k: g * scale for k, g in grads.items()}
    after = float(np.sqrt(sum(float((g * g).sum()) for g in clipped.values())))
    return clipped, norm, after


@dataclass
class RunReport:
    config: TrainConfig
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    clipped_norms: list = field(default_factory=list)
    grid_sides: list = field(default_factory=list)
    wall_clock: float = 0.0
    metrics: dict = field(default_factory=dict)

    def trace_csv(self):
        rows = ["iteration,loss,grad_norm,clipped_norm,grid_side"]
        for i, (l, g, c, m) in enumerate(
            zip(self.losses, self.grad_norms, self.clipped_norms, self.grid_sides)
        ):
            rows.append(f"{i},{l!r},{g!r},{c!r},{m}")
        return "\n".join(rows) + "\n"

    def to_text(self):
        out = [f"iterations_run = {len(self.losses)}", f"wall_clock_s = {self.wall_clock:.3f}"]
        if self.losses:
            out.append(f"final_loss = {self.losses[-1]!r}")
        out.append("# config")
        out.append(self.config.to_text().rstrip())
        for split, report in self.metrics.items():
            out.append(f"# metrics {split}")
            out.append(report.to_text().rstrip())
        return "\n".join(out) + "\n"


def training_step(model: Model, sample, pset, weights: LossWeights):
    """Forward pass and total loss for one grid of one sample."""
    rgb = extract(sample.frame.rgb, pset)
    cd = extract(sample.coarse_depth, pset)
    cn = extract(sample.coarse_normal, pset)
    depth, normal = model(rgb, cd, cn, pset)
    pseudo = sample.pseudo
    crop_pseudo = PseudoNormalField(extract(pseudo.normals, pset), extract(pseudo.mask, pset))
    gt = extract(sample.frame.depth, pset)
    return loss_breakdown(depth, normal, gt, weights=weights, pseudo=crop_pseudo)


def train(cfg: TrainConfig, samples, checkpoint_path=None, model: Model | None = None,
          on_step=None):
    """Train on ``samples`` (the ``train`` split is used when present).

    Returns ``(model, optimizer, report, rng)``.  Deterministic for a given
    config, seed and sample list.
    """
    cfg.validate()
    pool = [s for s in samples if s.split == "train"] or list(samples)
    if not pool:
        raise TrainingError("no training samples")
    extent = pool[0].frame.extent
    extent.validate(cfg.cell)
    grid = GridConfig(cfg.grid_probs)
    weights = cfg.loss_weights()
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = Model.create(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay)
    report = RunReport(cfg)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        sample = pool[int(rng.integers(len(pool)))]
        m = choose_config(grid, rng)
        pset = sample_grid(extent, m, rng, align=cfg.cell)
        try:
            loss, terms = training_step(model, sample, pset, weights)
        except nc.NonFiniteError as exc:
            raise TrainingError(f"iteration {it}: non-finite value ({exc})") from exc
        for name, term in terms.items():
            if not np.isfinite(term.item()):
                raise TrainingError(f"iteration {it}: non-finite {name} loss")
        grads = nc.backward(loss, model.params)
        grads, before, after = clip_global_norm(grads, cfg.clip_norm)
        opt.lr = learning_rate(cfg, it)
        opt.step(grads)
        report.losses.append(loss.item())
        report.grad_norms.append(before)
        report.clipped_norms.append(after)
        report.grid_sides.append(m)
        if on_step is not None:
            on_step(it, loss.item())
        if checkpoint_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save(checkpoint_path, model, extent, opt, it + 1, rng)
        if it % 100 == 0:
            log.debug("iter %d loss %.6g m=%d", it, loss.item(), m)
    report.wall_clock = time.perf_counter() - start
    if checkpoint_path:
        save(checkpoint_path, model, extent, opt, cfg.iterations, rng)
    return model, opt, report, rng


def save(path, model: Model, extent: ImageExtent, opt: AdamW | None = None, step=0, rng=None):
    arch = model.cfg.to_dict()
    arch["patch_size"] = list(extent.patch_size)
    fileio.save_checkpoint(
        path, arch, {k: p.data for k, p in model.params.items()},
        opt.state() if opt is not None else None, step,
        rng.bit_generator.state if rng is not None else None,
    )


def load(path):
    """Returns ``(model, patch_size, header, moments)``."""
    header, params, moments = fileio.load_checkpoint(path)
    arch = dict(header["arch"])
    patch_size = tuple(arch.pop("patch_size"))
    cfg = ModelConfig(**arch)
    expected = Model.create(cfg).params.keys()
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise fileio.CheckpointError(f"parameter names mismatch: missing {missing} extra {extra}")
    model = Model(cfg, {k: nc.parameter(params[k], k) for k in expected})
    return model, patch_size, header, moments
