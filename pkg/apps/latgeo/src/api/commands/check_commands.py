"""Gradient self-check and ablation grid commands."""

import argparse
import json
import logging
from pathlib import Path

from src.core.dependencies import (
    get_output_dir,
    get_run_config,
    get_train_val,
    parse_assignments,
    write_manifest,
)
from src.core.exceptions import StorageError
from src.services import ablation_service, gradcheck_service

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    gradcheck = subparsers.add_parser("gradcheck", help="Finite-difference check of every op and a micro model")
    gradcheck.add_argument("--cases", type=int, default=100, help="Seeded cases per op and micro models checked")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--tolerance", type=float, default=gradcheck_service.TOLERANCE)
    gradcheck.add_argument("--max-coords", type=int, default=6, help="Sampled coordinates per model parameter")
    gradcheck.add_argument("--out", type=Path, help="Directory for the JSON report")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    ablate = subparsers.add_parser("ablate", help="Train and score a grid of configurations")
    ablate.add_argument("--data", type=Path, required=True, help="Scenes JSONL")
    ablate.add_argument("--val", type=Path, help="Validation scenes JSONL (default: split --data)")
    ablate.add_argument("--grid", required=True,
                        help=f"Preset ({', '.join(ablation_service.PRESETS)}) or JSON list of override objects")
    ablate.add_argument("--config", type=Path, help="Base JSON config shared by every row")
    ablate.add_argument("--set", action="append", metavar="KEY=VALUE", help="Base override, repeatable")
    ablate.add_argument("--out", type=Path, help="Output directory")
    ablate.add_argument("--seed", type=int)
    ablate.add_argument("--max-epochs", type=int)
    ablate.add_argument("--rl", action="store_true", help="Follow XE with self-critical training")
    ablate.set_defaults(handler=cmd_ablate)


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """
    Run the suite and exit 2 (GradientCheckError) when any tensor exceeds the tolerance.
    """
    report = gradcheck_service.run_gradcheck(args.cases, args.seed, args.tolerance, args.max_coords)
    if args.out:
        out_dir = Path(args.out)
        path = out_dir / "gradcheck.json"
        write_manifest(out_dir, "gradcheck", get_run_config(args), args.seed, {"report": path})
        try:
            path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise StorageError(f"Could not write gradcheck report {path}: {e}") from e
    gradcheck_service.require_passing(report)
    logger.info(f"gradcheck passed: {len(report.results)} tensors within {report.tolerance:g}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    entries = ablation_service.load_grid(args.grid)
    base = {"train.seed": args.seed, "train.max_epochs": args.max_epochs}
    cfg = get_run_config(args, base)
    out_dir = get_output_dir(args, "ablate")
    write_manifest(out_dir, "ablate", cfg, cfg.train.seed, {
        "table": out_dir / "ablation.csv",
        "grid": json.dumps([e.model_dump() for e in entries], sort_keys=True),
    })
    train, val = get_train_val(args, cfg)
    overrides = {**parse_assignments(args.set), **{k: v for k, v in base.items() if v is not None}}
    overrides["train.seed"] = cfg.train.seed
    ablation_service.run_grid(entries, train, val, out_dir, args.config, overrides, with_rl=args.rl)
    return 0
