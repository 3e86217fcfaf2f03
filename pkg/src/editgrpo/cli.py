"""Command-line interface: ``python3 -m editgrpo <command> [flags]``.

Exit codes: 0 success, 1 config error, 2 numerical abort, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .grpo import MODES, NumericalAbort
from .pipeline import ConfigError, RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("editgrpo")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here 2 means a numerical abort
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--out", help="output directory")
    common.add_argument("--iters", type=int, help="GRPO iterations")
    common.add_argument("--group-size", type=int)
    common.add_argument("--noise-level", type=float, help="SDE noise level a")
    common.add_argument("--steps", type=int, help="sampler steps T")
    common.add_argument("--oracle-masks", action="store_true", help="use ground-truth edit masks in training")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="editgrpo", description="Region-decoupled GRPO on a synthetic editing task.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="flow-matching pretraining of the base model")
    for name, helptext in (("train", "GRPO fine-tuning of a base checkpoint"),
                           ("eval", "evaluate a checkpoint on held-out tasks"),
                           ("ablate", "base plus all four objectives, paired seeds")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--checkpoint", help="checkpoint JSON (pretrains first when omitted, except for eval)")
        if name == "eval":
            sp.add_argument("--n", type=int, help="number of held-out tasks")
            sp.add_argument("--params", choices=("ema", "current"), default="ema",
                            help="which weights of a fine-tuned checkpoint to evaluate")
    sub.add_parser("report", parents=[common], help="print the ablation table of an output directory")
    return p


def resolve_config(args) -> RunConfig:
    cfg = pipeline.load_config(args.config) if args.config else RunConfig()
    cfg = pipeline.with_overrides(cfg, seed=args.seed, mode=args.mode, out=args.out, iters=args.iters,
                                  group_size=args.group_size, noise_level=args.noise_level,
                                  steps=args.steps, oracle_masks=args.oracle_masks)
    if getattr(args, "n", None) is not None:
        try:
            cfg = pipeline.replace(cfg, eval_tasks=int(args.n))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return cfg


def _base(cfg: RunConfig, args):
    if getattr(args, "checkpoint", None):
        params, info = pipeline.load_checkpoint(args.checkpoint)
        return params, info
    log.info("no --checkpoint given, running pretraining first")
    return pipeline.cmd_pretrain(cfg).params, {"extra": {}}


def run(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    if args.command == "pretrain":
        res = pipeline.cmd_pretrain(cfg)
        print(json.dumps({"checkpoint": str(out / "base.json"), "val_initial": res.val_initial,
                          "val_final": res.val_final, "ratio": res.val_final / res.val_initial}))
    elif args.command == "train":
        base, _ = _base(cfg, args)
        res = pipeline.cmd_train(cfg, base)
        last = res.log[-1] if res.log else {}
        print(json.dumps({"checkpoint": str(out / "final.json"), "iterations": len(res.log),
                          "r_sem": last.get("r_sem"), "r_pres": last.get("r_pres")}))
    elif args.command == "eval":
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint")
        params, info = pipeline.load_checkpoint(args.checkpoint)
        if args.params == "ema" and "ema" in info["extra"]:
            params = pipeline.NetParams(params.arch, info["extra"]["ema"])
        res = pipeline.cmd_eval(cfg, params)
        print(json.dumps(res.summary()))
    elif args.command == "ablate":
        base, _ = _base(cfg, args)
        rows = pipeline.cmd_ablate(cfg, base)
        print(pipeline.format_table(rows))
    elif args.command == "report":
        print(pipeline.cmd_report(out))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        # malformed checkpoints and task files surface here
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
