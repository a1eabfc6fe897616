"""Command-line entry point: ``idgan {generate-data,train,eval,traverse,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .errors import IDGANError, InvalidInputError
from .train import FROZEN_ENCODER_MODES, list_checkpoints


def _int_list(text):
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [t for t in text.replace(" ", "").split(",") if t]


def _parser():
    p = argparse.ArgumentParser(prog="idgan", description="Train and evaluate two-stage disentangled generators.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required, help="YAML experiment config")
        sp.add_argument("--out", type=Path, help="output root (default: config 'output', then $%s)"
                        % ex.HOME_ENV)

    sp = sub.add_parser("generate-data", help="render the configured dataset file")
    common(sp)

    sp = sub.add_parser("train", help="train stage 1 then stage 2 for every seed")
    common(sp)
    sp.add_argument("--seeds", type=_int_list, help="override the config's seed list, e.g. 0,1,2")
    sp.add_argument("--resume", action="store_true", help="continue unfinished runs from their last checkpoint")
    sp.add_argument("--parallel", type=int, help="number of seeds trained concurrently")

    sp = sub.add_parser("eval", help="compute metrics for completed runs")
    common(sp)
    sp.add_argument("--seeds", type=_int_list)
    sp.add_argument("--metrics", type=_str_list, help="override the config's metric list")
    sp.add_argument("--eval-seed", type=int, help="evaluation seed (default: config eval.seed)")

    sp = sub.add_parser("traverse", help="latent traversal grids as PNG")
    sp.add_argument("checkpoint", nargs="?", type=Path, help="generator or decoder checkpoint")
    common(sp, config_required=False)
    sp.add_argument("--seeds", type=_int_list, help="runs to render when --config is given")
    sp.add_argument("--compare", type=Path, help="stage-1 checkpoint rendered above the generator")
    sp.add_argument("--dims", type=_int_list)
    sp.add_argument("--range", type=float, help="sweep half-width in prior standard deviations")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--anchor-seed", type=int)

    sp = sub.add_parser("report", help="tabulate evaluation outputs as markdown and CSV")
    sp.add_argument("inputs", nargs="*", type=Path, help="eval row files (eval-s<seed>.csv)")
    common(sp, config_required=False)
    sp.add_argument("--configs", type=Path, nargs="*", default=[],
                    help="configs whose aggregate eval files are collected")
    sp.add_argument("--eval-seed", type=int, default=0)
    sp.add_argument("--name", default="report")
    return p


def _traverse(args):
    if args.config is None:
        if args.checkpoint is None:
            raise InvalidInputError("traverse needs a checkpoint or --config")
        if args.out is None:
            raise InvalidInputError("traverse with a checkpoint needs --out")
        return ex.cmd_traverse(args.checkpoint, args.out, args.dims, _pick(args.range, 3.0),
                               _pick(args.steps, 10), _pick(args.anchor_seed, 0), args.compare)
    cfg = ex.load_config(args.config)
    root = ex.output_root(cfg, args.out)
    t = cfg.traverse
    written = []
    for seed in args.seeds or cfg.seeds:
        run_dir = ex.run_directory(cfg, seed, root)
        s1 = list_checkpoints(run_dir / "checkpoints", "stage1")
        s2 = list_checkpoints(run_dir / "checkpoints", "stage2")
        if not (s1 or s2):
            raise InvalidInputError(f"{run_dir} has no checkpoints")
        kw = dict(dims=args.dims if args.dims is not None else t.dims, range_=_pick(args.range, t.range),
                  steps=_pick(args.steps, t.steps), anchor_seed=_pick(args.anchor_seed, t.anchor_seed))
        if s2:
            mode = cfg.stage2_config(seed).mode
            compare = s1[-1] if s1 and mode in FROZEN_ENCODER_MODES else None
            written += ex.cmd_traverse(s2[-1], run_dir / "figures", compare=compare, **kw)
        if s1:
            written += ex.cmd_traverse(s1[-1], run_dir / "figures", **kw)
    return written


def _pick(value, default):
    return default if value is None else value


def _report(args):
    inputs = list(args.inputs)
    for path in args.configs:
        cfg = ex.load_config(path)
        root = ex.output_root(cfg, args.out)
        inputs.append(root / "runs" / cfg.hash / f"eval-s{args.eval_seed}.csv")
    if not inputs:
        raise InvalidInputError("report needs eval row files or --configs")
    out = args.out if args.out is not None else ex.output_root()
    return ex.cmd_report(inputs, Path(out) / "reports", args.name)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate-data":
            ex.cmd_generate_data(ex.load_config(args.config), args.out)
        elif args.command == "train":
            cfg = ex.load_config(args.config)
            manifests = ex.cmd_train(cfg, args.seeds, args.out, args.resume, args.parallel)
            failed = 0
            for m in manifests:
                line = f"seed {m['seed']}: {m['status']}"
                if m["status"] != "complete":
                    failed += 1
                    f = m["failure"] or {}
                    line += f" at {f.get('stage')} step {f.get('step')}: {f.get('error')}"
                print(line)
            return 1 if failed else 0
        elif args.command == "eval":
            ex.cmd_eval(ex.load_config(args.config), args.seeds, args.out, args.metrics, args.eval_seed)
        elif args.command == "traverse":
            _traverse(args)
        elif args.command == "report":
            _report(args)
    except IDGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
