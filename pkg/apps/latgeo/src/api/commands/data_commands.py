"""Synthetic corpus command."""

import argparse
import logging
from pathlib import Path

from src.core.dependencies import get_run_config, write_manifest
from src.infra.scene_repo import write_scenes
from src.services.synth_service import generate_corpus

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="Generate a synthetic scene corpus as JSONL")
    parser.add_argument("--out", type=Path, required=True, help="Scene JSONL to write")
    parser.add_argument("--n", type=int, help="Number of scenes")
    parser.add_argument("--seed", type=int, help="First scene seed")
    parser.add_argument("--objects-min", type=int)
    parser.add_argument("--objects-max", type=int)
    parser.add_argument("--classes", type=int, help="Number of object classes")
    parser.add_argument("--dfeat", type=int, help="Feature dimension")
    parser.add_argument("--config", type=Path, help="JSON config with flat dotted keys")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Config override, repeatable")
    parser.set_defaults(handler=cmd_synth)


def cmd_synth(args: argparse.Namespace) -> int:
    """
    Write N synthetic scenes.

    Flow:
    1. Resolve synth config from defaults, file and flags
    2. Write the manifest next to the output file
    3. Generate scenes seed..seed+N-1 and write them deterministically
    """
    cfg = get_run_config(args, {
        "synth.n_scenes": args.n,
        "synth.seed": args.seed,
        "synth.objects_min": args.objects_min,
        "synth.objects_max": args.objects_max,
        "synth.n_classes": args.classes,
        "synth.d_feat": args.dfeat,
    })
    out = Path(args.out)
    write_manifest(out.parent, "synth", cfg, cfg.synth.seed, {"scenes": out}, name=f"{out.stem}.manifest.json")
    count = write_scenes(out, generate_corpus(cfg.synth))
    logger.info(f"synth: {count} scenes -> {out}")
    return 0
