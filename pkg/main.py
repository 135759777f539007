import os
import sys
import json
import argparse
import logging
from typing import List, Optional

from config.run_config import RunConfig, load_run_config
from processing import job_processor
from utils.constants import EXIT_INPUT_ERROR, EXIT_INTERNAL_ERROR, EXIT_OK
from utils.errors import InputError
from utils.logging_utils import setup_logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddtrack", description="Desk-scale diffusion-model tractography")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="Master seed (default: DDTRACK_SEED)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="Build a phantom and simulate its DWI")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--template", help="Phantom template name under templates/")
    p.add_argument("--bundles", help="JSON file with a list of bundle specs replacing the template's")
    p.add_argument("--snr", type=float, help="Rician SNR relative to S0")
    p.add_argument("--noiseless", action="store_true", help="Skip Rician noise")

    p = sub.add_parser("fit-sh", parents=[common], help="Fit SH coefficients to a DWI volume")
    p.add_argument("dwi")
    p.add_argument("out")
    p.add_argument("--lmax", type=int)
    p.add_argument("--reg", type=float)

    p = sub.add_parser("train", parents=[common], help="Train the orientation model on a phantom directory")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--variant", choices=["full", "no_local", "regression"])
    p.add_argument("--resume", help="Checkpoint to resume from")

    p = sub.add_parser("track", parents=[common], help="Track streamlines with a trained model")
    p.add_argument("checkpoint")
    p.add_argument("sh")
    p.add_argument("mask")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds-per-voxel", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--angle", type=float)
    p.add_argument("--steps", type=int, help="Reverse diffusion steps per orientation")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--unidirectional", action="store_true")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    mode.add_argument("--stochastic", dest="deterministic", action="store_false")

    p = sub.add_parser("eval", parents=[common], help="Score a tractogram against phantom ground truth")
    p.add_argument("tractogram")
    p.add_argument("phantom_dir")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export", parents=[common], help="Convert a native tractogram to TCK")
    p.add_argument("tractogram")
    p.add_argument("out")
    return parser


def _read_bundles(path: str) -> list:
    if not os.path.exists(path):
        raise InputError(f"Bundle file '{path}' does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"Bundle file '{path}' is not valid JSON: {e}") from None
    if not isinstance(payload, list):
        raise InputError(f"Bundle file '{path}' must hold a JSON list of bundles")
    return payload


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """CLI flags over the JSON file over defaults."""
    config = load_run_config(args.config).with_overrides(seed=args.seed)
    if args.command == "phantom":
        config = config.with_overrides(
            "phantom", template=args.template, snr=args.snr,
            bundles=_read_bundles(args.bundles) if args.bundles else None)
        if args.noiseless:
            payload = config.model_dump()
            payload["phantom"]["snr"] = None
            config = RunConfig.model_validate(payload)
    elif args.command == "fit-sh":
        config = config.with_overrides("sh", l_max=args.lmax, reg=args.reg)
    elif args.command == "train":
        config = config.with_overrides("train", epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
        config = config.with_overrides("model", variant=args.variant)
    elif args.command == "track":
        config = config.with_overrides(
            "track", seeds_per_voxel=args.seeds_per_voxel, step=args.step, angle=args.angle,
            num_steps=args.steps, max_steps=args.max_steps, workers=args.workers, batch_size=args.batch_size,
            deterministic=args.deterministic, bidirectional=False if args.unidirectional else None)
    return config


def _output_folder(args: argparse.Namespace) -> str:
    if args.command in ("phantom", "track", "eval"):
        return args.out
    if args.command == "train":
        return args.out_dir
    return os.path.dirname(os.path.abspath(args.out))


def run(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    if args.command == "phantom":
        job_processor.cmd_phantom(config, args.out)
    elif args.command == "fit-sh":
        job_processor.cmd_fit_sh(config, args.dwi, args.out)
    elif args.command == "train":
        job_processor.cmd_train(config, args.data_dir, args.out_dir, args.resume)
    elif args.command == "track":
        job_processor.cmd_track(config, args.checkpoint, args.sh, args.mask, args.out)
    elif args.command == "eval":
        job_processor.cmd_eval(config, args.tractogram, args.phantom_dir, args.out)
    elif args.command == "export":
        job_processor.cmd_export(config, args.tractogram, args.out)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    # 1) Set up logging in the command's output directory
    setup_logging(_output_folder(args))
    logging.info(f"Running '{args.command}'")

    # 2) Run the command; input problems exit 2, everything else 3
    try:
        run(args)
    except InputError as e:
        logging.error(str(e))
        return EXIT_INPUT_ERROR
    except Exception as e:
        logging.exception(f"Internal error in '{args.command}': {type(e).__name__}: {e}")
        return EXIT_INTERNAL_ERROR
    logging.info(f"'{args.command}' finished")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
