"""Command line interface: ``kitsunet <subcommand> [options]``.

Every subcommand resolves the configuration (defaults, ``--toy`` preset,
``--config`` file, flags) and writes it to ``<out>/config.resolved.json``
before doing any work.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from . import phantom, pipeline
from .config import TOY_PRESET, ConfigError, RunConfig, build_config, load_config_file
from .preprocess import DatasetStats

log = logging.getLogger("kitsunet")

SUBCOMMANDS = ("phantom", "preprocess", "train", "predict", "postprocess", "evaluate",
               "pipeline")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (seeds.seed)")
    common.add_argument("--toy", action="store_true",
                        help="tiny network preset: base_features 8, levels 4, patch 64x64x32")
    common.add_argument("--device", help="torch device, e.g. cpu or cuda")
    common.add_argument("--out", type=Path, help="output directory (paths.out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kitsunet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n", type=int, help="number of cases (phantom.n_cases)")

    s = sub.add_parser("preprocess", parents=[common], help="clip, normalize and resample cases")
    s.add_argument("--data", type=Path, required=True, help="dataset directory")
    s.add_argument("--stats", type=Path, help="reuse stats.json instead of computing")

    s = sub.add_parser("train", parents=[common], help="train on a preprocessed directory")
    s.add_argument("--data", type=Path, required=True, help="preprocessed directory")
    s.add_argument("--resume", type=Path, help="checkpoint to continue from")
    s.add_argument("--max-iterations", type=int)

    s = sub.add_parser("predict", parents=[common], help="sliding-window inference")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True, help="raw dataset directory")
    s.add_argument("--stats", type=Path, help="stats.json overriding the checkpoint copy")
    s.add_argument("--cases", nargs="*", help="case ids (default: all)")
    s.add_argument("--save-probabilities", action="store_true")
    s.add_argument("--nifti", action="store_true", help="also write segmentation.nii.gz")

    s = sub.add_parser("postprocess", parents=[common], help="connected-component cleanup")
    s.add_argument("--data", type=Path, required=True, help="prediction directory")
    s.add_argument("--disable", action="store_true", help="copy through unchanged")

    s = sub.add_parser("evaluate", parents=[common], help="Dice evaluation and report")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--metrics", type=Path, help="training metrics.csv for the loss curve")
    s.add_argument("--images", type=Path, help="image directory for slice overlays")

    s = sub.add_parser("pipeline", parents=[common], help="phantom -> ... -> evaluate")
    s.add_argument("--max-iterations", type=int)
    return p


def resolve_config(args) -> RunConfig:
    layers = []
    if args.toy:
        layers.append(TOY_PRESET)
    if args.config is not None:
        layers.append(load_config_file(args.config))
    flags = {}
    if args.seed is not None:
        flags.setdefault("seeds", {})["seed"] = args.seed
    if args.device is not None:
        flags.setdefault("trainer", {})["device"] = args.device
    if args.out is not None:
        flags.setdefault("paths", {})["out"] = str(args.out)
    if getattr(args, "n", None) is not None:
        flags.setdefault("phantom", {})["n_cases"] = args.n
    if getattr(args, "save_probabilities", False):
        flags.setdefault("inference", {})["save_probabilities"] = True
    if getattr(args, "nifti", False):
        flags.setdefault("inference", {})["write_nifti"] = True
    layers.append(flags)
    return build_config(layers)


def _run(args, cfg: RunConfig) -> None:
    out = Path(cfg.paths.out)
    cmd = args.command
    if cmd == "phantom":
        base = phantom.default_spec()
        base.noise_sigma = cfg.phantom.noise_sigma
        phantom.make_dataset(out, cfg.phantom.n_cases, cfg.seeds.seed, base,
                             cfg.phantom.jitter_spacing)
    elif cmd == "preprocess":
        stats = DatasetStats.load(args.stats) if args.stats else None
        pipeline.preprocess_dataset(args.data, out, stats=stats,
                                    percentiles=(cfg.preprocess.lo_percentile,
                                                 cfg.preprocess.hi_percentile))
    elif cmd == "train":
        pipeline.train_from_dir(cfg, args.data, out, resume=args.resume,
                                max_iterations=args.max_iterations)
    elif cmd == "predict":
        stats = DatasetStats.load(args.stats) if args.stats else None
        pipeline.predict_dir(args.checkpoint, args.data, out, args.cases, cfg, stats)
    elif cmd == "postprocess":
        pipeline.postprocess_dir(args.data, out, cfg.postprocess.enabled and not args.disable,
                                 cfg.postprocess.connectivity)
    elif cmd == "evaluate":
        pipeline.evaluate_dirs(args.pred, args.gt, out, args.metrics, args.images)
    elif cmd == "pipeline":
        pipeline.run_pipeline(cfg, out, args.max_iterations)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"kitsunet: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.paths.out)
    cfg.save(out / "config.resolved.json")
    torch.manual_seed(cfg.seeds.seed)
    try:
        _run(args, cfg)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"kitsunet {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
