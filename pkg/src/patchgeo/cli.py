"""Command-line entry point: ``patchgeo {gen,train,infer,eval,ablate}``.

Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import fileio
from .ablation import run_ablation
from .data import by_split, load_dataset, make_dataset
from .inference import evaluate, evaluate_coarse, infer
from .patchgrid import ImageExtent
from .training import ConfigError, TrainConfig, load, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _config(args):
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    cfg = TrainConfig.from_text(text, args.config or "<defaults>")
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "iterations", None) is not None:
        cfg.iterations = args.iterations
    return cfg.validate()


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_gen(args):
    size = args.size
    make_dataset(args.n, ImageExtent(size, size), seed=args.seed or 0, root=args.out)
    print(f"wrote {args.n} frames to {args.out}")


def _dataset(cfg):
    if not cfg.dataset:
        raise UsageError("no dataset given (use --dataset or the 'dataset' config key)")
    return load_dataset(cfg.dataset)


def cmd_train(args):
    cfg = _config(args)
    samples = _dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    model, opt, report, rng = train(cfg, samples, checkpoint_path=ckpt)
    val = by_split(samples, "val")
    if val:
        report.metrics["val"] = evaluate(model, val, val[0].frame.extent.patch_size,
                                         cfg.token_budget)
    _write(os.path.join(args.out, "run_report.txt"), report.to_text())
    _write(os.path.join(args.out, "loss_trace.csv"), report.trace_csv())
    _write(os.path.join(args.out, "config.txt"), cfg.to_text())
    print(f"trained {len(report.losses)} iterations; checkpoint at {ckpt}")


def cmd_infer(args):
    model, patch, _, _ = load(args.checkpoint)
    samples = load_dataset(args.dataset, split=args.split)
    os.makedirs(args.out, exist_ok=True)
    notes = []
    for s in samples:
        res = infer(model, s.frame.rgb, s.coarse_depth, s.coarse_normal, patch,
                    stride=(args.stride, args.stride) if args.stride else None,
                    token_budget=args.token_budget)
        fileio.write_pfm(os.path.join(args.out, f"{s.id}_depth.pfm"), res.depth)
        fileio.write_pfm(os.path.join(args.out, f"{s.id}_normal.pfm"), res.normal)
        notes.append(f"{s.id}\tpatches={len(res.pset)}\tbanded={str(res.banded).lower()}"
                     f"\tbands={res.n_bands}")
    _write(os.path.join(args.out, "infer_report.txt"), "\n".join(notes) + "\n")
    print(f"refined {len(samples)} frames into {args.out}")


def cmd_eval(args):
    samples = load_dataset(args.dataset, split=args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    patch = samples[0].frame.extent.patch_size
    if args.coarse:
        report = evaluate_coarse(samples, patch)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --coarse)")
        model, patch, _, _ = load(args.checkpoint)
        report = evaluate(model, samples, patch, args.token_budget)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "metrics.txt"), report.to_text())
    sys.stdout.write(report.to_text())


def cmd_ablate(args):
    cfg = _config(args)
    samples = _dataset(cfg)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    os.makedirs(args.out, exist_ok=True)
    results = run_ablation(cfg, samples, seeds, log=print)
    lines = []
    for name, (mean, per_seed) in results.items():
        _write(os.path.join(args.out, f"{name}_metrics.txt"), mean.to_text())
        lines.append(f"{name}\tabsrel={mean.absrel!r}\tce={mean.ce!r}")
    full, no_cross = results["full"][0], results["no_cross"][0]
    lines.append(f"cross_attention_helps_ce = {str(full.ce <= no_cross.ce).lower()}")
    lines.append(f"cross_attention_helps_absrel = {str(full.absrel <= no_cross.absrel).lower()}")
    _write(os.path.join(args.out, "ablation_summary.txt"), "\n".join(lines) + "\n")
    print("\n".join(lines))


def build_parser():
    p = _Parser(prog="patchgeo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        return sp

    g = common(sub.add_parser("gen", help="synthesize a dataset"), config=False)
    g.add_argument("--n", type=int, default=60)
    g.add_argument("--size", type=int, default=96)

    t = common(sub.add_parser("train", help="train a refiner"))
    t.add_argument("--dataset")
    t.add_argument("--iterations", type=int)

    i = common(sub.add_parser("infer", help="refine frames"), config=False)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True)
    i.add_argument("--split", default="test")
    i.add_argument("--stride", type=int)
    i.add_argument("--token-budget", type=int)

    e = common(sub.add_parser("eval", help="score a checkpoint"), config=False)
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--coarse", action="store_true", help="score the coarse inputs")
    e.add_argument("--token-budget", type=int)

    a = common(sub.add_parser("ablate", help="cross-attention / RoPE ablations"))
    a.add_argument("--dataset")
    a.add_argument("--iterations", type=int)
    a.add_argument("--seeds", type=int, default=3)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.command == "gen" and args.n < 1:
            raise UsageError("gen: --n must be >= 1")
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        sys.stderr.write(f"error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
