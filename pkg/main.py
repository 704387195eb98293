import argparse
import logging
import sys

import torch

from config.config import Config, ExperimentConfig
from control.controller import ExperimentController
from control.errors import PoseAdaptError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poseadapt", description="Occlusion-resilient pose adaptation on synthetic figures")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, help="overrides config.seed")
        sp.add_argument("--out", help="output root (overrides config.out_dir)")
        sp.add_argument("--force", action="store_true", help="overwrite non-empty output directories")
        return sp

    common(sub.add_parser("generate", help="write the synthetic source/target splits")).add_argument(
        "--severity-sweep", action="store_true", help="also write target_eval_sev1..5")
    common(sub.add_parser("pretrain", help="train the pose network on labeled source data"))
    common(sub.add_parser("train-prior", help="build negatives and train the pose prior"))
    common(sub.add_parser("adapt", help="mean-teacher adaptation on the unlabeled target split")).add_argument(
        "--variant", default="full", choices=["mt_ocl", "prior", "full"])
    ev = common(sub.add_parser("evaluate", help="PCK tables, per-sample records and overlays for a checkpoint"))
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", help="one split under data/ (default: every eval split present)")
    common(sub.add_parser("ablate", help="four-variant comparison over config.seeds")).add_argument(
        "--seeds", type=int, nargs="+", help="overrides config.seeds")
    common(sub.add_parser("report", help="static plots and a summary over finished runs")).add_argument(
        "--runs", nargs="*", default=[], help="run directories (default: every adapt run under --out)")
    return p


def setup_logging(level: str):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="[%(name)s] %(message)s", stream=sys.stderr)


def command_kwargs(args) -> dict:
    if args.command == "generate":
        return {"severity_sweep": args.severity_sweep}
    if args.command in ("pretrain", "train-prior"):
        return {"seed": args.seed}
    if args.command == "adapt":
        return {"seed": args.seed, "variant": args.variant}
    if args.command == "evaluate":
        return {"checkpoint": args.checkpoint, "split": args.split}
    if args.command == "ablate":
        return {"seeds": args.seeds}
    return {"run_dirs": args.runs}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    rt = Config()
    setup_logging(rt.LOG_LEVEL)
    if rt.THREADS > 0:
        torch.set_num_threads(rt.THREADS)

    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        ctl = ExperimentController(cfg, args.out, args.force)
    except PoseAdaptError as e:
        # no controller yet: same one-line format as ExperimentController.raise_error
        msg = str(e).replace('"', "'")
        print(f'error code={e.code} command={args.command} message="{msg}"', file=sys.stderr)
        return e.exit_code

    return ctl.run(args.command, **command_kwargs(args))


if __name__ == "__main__":
    sys.exit(main())
