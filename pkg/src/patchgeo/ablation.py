"""Variant comparisons under one training budget."""

from __future__ import annotations

from dataclasses import replace

from .data import by_split
from .inference import evaluate
from .metrics import MetricReport
from .training import TrainConfig, train

VARIANTS = {
    "full": {},
    "no_cross": {"cross_attention": False},
    "local_rope": {"global_rope": False},
}


def run_ablation(cfg: TrainConfig, samples, seeds=(0, 1, 2), variants=("full", "no_cross", "local_rope"),
                 split="test", log=None):
    """Train each variant once per seed and average the held-out reports.

    Returns ``{variant: (mean_report, [per-seed reports])}``.
    """
    held_out = by_split(samples, split) or list(samples)
    out = {}
    for name in variants:
        per_seed = []
        for seed in seeds:
            vcfg = replace(cfg, seed=seed, **VARIANTS[name])
            model, _, report, _ = train(vcfg, samples)
            patch = held_out[0].frame.extent.patch_size
            per_seed.append(evaluate(model, held_out, patch, cfg.token_budget))
            if log:
                log(f"{name} seed={seed} absrel={per_seed[-1].absrel:.5f} ce={per_seed[-1].ce:.5f}")
        out[name] = (MetricReport.mean(per_seed), per_seed)
    return out
