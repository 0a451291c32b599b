"""Command-line entry point.

Configuration is layered: built-in defaults, then ``--config FILE``, then
``--set key=value`` pairs and dedicated flags. ``--print-config`` writes the
resolved configuration in the same ``key = value`` format and exits, so its
output can be fed back through ``--config``.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for runtime
failures. Errors are reported on stderr as a single JSON object.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, dump_config, load_config
from .dataset import generate_dataset, load_dataset, save_dataset
from .errors import CocoDiffError, ConfigError, ParseError
from .evaluation import ABLATION_GRIDS, SWEEP_AXES, SweepSpec, evaluate, export_embeddings, run_sweep
from .training import Checkpoint, run_pipeline

log = logging.getLogger("cocodiff")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the same flags appear before or after the subcommand
    p = _Parser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="key = value configuration file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="seed for data generation, initialization, shuffling and noise")
    g.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for checkpoints and CSVs")
    g.add_argument("--print-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the resolved configuration and exit")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS,
                   help="override any configuration key, e.g. train.tau=0.1 (repeatable)")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="cocodiff", parents=[common],
                     description="Skeleton action recognition with text-guided latent diffusion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic skeleton dataset")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--jitter", type=float, help="per-coordinate Gaussian noise std")
    p.add_argument("--style", type=float, help="per-sample amplitude perturbation std")

    p = sub.add_parser("train", parents=[common], help="train the baseline or the full pipeline")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--val-data", help="validation dataset for best-epoch selection")
    p.add_argument("--baseline", action="store_true", help="cross-entropy encoder only, no diffusion")
    p.add_argument("--no-pretrain-gcn", action="store_true", help="skip encoder pretraining")
    p.add_argument("--no-pretrain-diffusion", action="store_true", help="skip diffusion pretraining")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the contrastive loss")
    p.add_argument("--T", type=int, help="number of diffusion steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in --out-dir")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics CSV (default: <out-dir>/eval.csv)")

    p = sub.add_parser("sweep", parents=[common], help="run an ablation grid")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--grid", help="comma-separated values (default: the published grid for the axis)")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--test-data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="sweep CSV (default: <out-dir>/sweep_<axis>.csv)")

    p = sub.add_parser("export-embeddings", parents=[common], help="write per-sample features to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include-generated", action="store_true",
                   help="also write features sampled by the full reverse chain")
    p.add_argument("--t-gen", type=int, help="start step of the reverse chain (default: T)")
    return parser


def _split_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args, dataset=None) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = cfg.with_overrides(_split_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.set_seed(args.seed)
    if getattr(args, "out_dir", None) is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    gen, tc = cfg.generation, cfg.train
    cmd = args.command
    if cmd == "gen-data":
        gen = replace(gen, **{k: v for k, v in (("num_classes", args.classes),
                                                ("samples_per_class", args.per_class),
                                                ("frames", args.frames), ("jitter_std", args.jitter),
                                                ("style_std", args.style)) if v is not None})
    if cmd in ("train", "sweep") and args.epochs is not None:
        tc = replace(tc, epochs=args.epochs,
                     lr_decay_epochs=tuple(e for e in tc.lr_decay_epochs if e < args.epochs))
    if cmd == "train":
        if args.lam is not None:
            tc = replace(tc, lam=args.lam)
        if args.T is not None:
            tc = replace(tc, T=args.T)
        if args.no_pretrain_gcn:
            tc = replace(tc, pretrain_encoder=False)
        if args.no_pretrain_diffusion:
            tc = replace(tc, pretrain_diffusion=False)
    if dataset is not None:
        gen = replace(gen, num_classes=dataset.num_classes, topology=dataset.topology)
    cfg = replace(cfg, generation=gen, train=tc).resolved()
    cfg.validate()
    return cfg


def _load(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"no such dataset file: {path}") from None


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args, cfg: RunConfig):
    ds = generate_dataset(cfg.generation)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    _emit({"command": "gen-data", "out": str(out), "samples": len(ds), "classes": ds.num_classes})


def cmd_train(args, cfg: RunConfig, train):
    val = _load(args.val_data) if args.val_data else None
    result = run_pipeline(cfg, train, val, out_dir=cfg.out_dir, baseline=args.baseline, resume=args.resume)
    final = result["baseline" if args.baseline else "final"]
    last = result["history"][-1] if result["history"] else {}
    _emit({"command": "train", "out_dir": cfg.out_dir, "checkpoint": str(Path(cfg.out_dir) / f"{final.stage}.ckpt"),
           "epochs": final.epoch, "train_acc": last.get("train_acc")})


def cmd_eval(args, cfg: RunConfig, data):
    ckpt = Checkpoint.load(args.checkpoint)
    rep = evaluate(ckpt, data)
    rows = [["top1", format(rep.top1, ".9g")], ["top5", format(rep.top5, ".9g")],
            ["div", format(rep.div, ".9g")], ["num_samples", rep.num_samples]]
    rows += [[f"class_{c}_top1", format(v, ".9g")] for c, v in enumerate(rep.per_class)]
    out = args.out or Path(cfg.out_dir) / "eval.csv"
    _write_rows(out, ["metric", "value"], rows)
    _emit({"command": "eval", "top1": rep.top1, "top5": rep.top5, "div": rep.div, "out": str(out)})


def _parse_grid(axis, text):
    if text is None:
        return list(ABLATION_GRIDS[axis])
    values = [v.strip() for v in text.split(",") if v.strip()]
    cast = {"lambda": float, "T": int}.get(axis, str)
    try:
        return [cast(v) for v in values]
    except ValueError:
        raise UsageError(f"bad --grid value for axis {axis}: {text!r}") from None


def cmd_sweep(args, cfg: RunConfig, train):
    grid = _parse_grid(args.axis, args.grid)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --seeds value: {args.seeds!r}") from None
    test = _load(args.test_data)
    val = _load(args.val_data) if args.val_data else None
    out = Path(args.out) if args.out else Path(cfg.out_dir) / f"sweep_{args.axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    timings = out.with_name(out.stem + "_timings.csv")
    rows = run_sweep(SweepSpec(args.axis, grid, cfg, seeds), train, test, out, timings, val)
    failed = sum(1 for r in rows if r[-1] != "ok")
    _emit({"command": "sweep", "out": str(out), "rows": len(rows), "failed": failed})


def cmd_export(args, cfg: RunConfig, data):
    ckpt = Checkpoint.load(args.checkpoint)
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.train.noise_seed
    export_embeddings(ckpt, data, args.out, args.include_generated, args.t_gen, seed)
    _emit({"command": "export-embeddings", "out": args.out,
           "rows": len(data) * (2 if args.include_generated else 1)})


def _fail(exc, code) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit": code}
    for attr in ("field", "line", "epoch", "batch", "axis"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: gen-data, train, eval, sweep, export-embeddings")
        level = logging.INFO if getattr(args, "verbose", 0) else logging.WARNING
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        torch.use_deterministic_algorithms(True, warn_only=True)
        data = _load(args.data) if hasattr(args, "data") else None
        cfg = resolve_config(args, data if args.command in ("train", "sweep") else None)
        if getattr(args, "print_config", False):
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.command == "gen-data":
            cmd_gen_data(args, cfg)
        elif args.command == "train":
            cmd_train(args, cfg, data)
        elif args.command == "eval":
            cmd_eval(args, cfg, data)
        elif args.command == "sweep":
            cmd_sweep(args, cfg, data)
        else:
            cmd_export(args, cfg, data)
    except (UsageError, ConfigError) as exc:
        return _fail(exc, EXIT_USAGE)
    except (CocoDiffError, OSError, RuntimeError, ValueError, KeyError) as exc:
        return _fail(exc, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
