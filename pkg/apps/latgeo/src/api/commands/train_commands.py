"""Cross-entropy and self-critical training commands."""

import argparse
import logging
from pathlib import Path

from src.core.dependencies import get_output_dir, get_run_config, get_train_val, write_manifest
from src.services import training_service

logger = logging.getLogger(__name__)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="Training scenes JSONL")
    parser.add_argument("--val", type=Path, help="Validation scenes JSONL (default: split --data)")
    parser.add_argument("--config", type=Path, help="JSON config with flat dotted keys")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Config override, repeatable")
    parser.add_argument("--out", type=Path, help="Run directory for checkpoints, logs and manifest")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--max-epochs", type=int)


def register(subparsers) -> None:
    train = subparsers.add_parser("train", help="Cross-entropy training with early stopping on CIDEr-D")
    _common(train)
    train.add_argument("--resume", type=Path, help="last.ckpt of an interrupted run")
    train.set_defaults(handler=cmd_train)

    rl = subparsers.add_parser("rl", help="Self-critical fine-tuning from an XE checkpoint")
    _common(rl)
    rl.add_argument("--checkpoint", "--resume", dest="checkpoint", type=Path, required=True,
                    help="XE best.ckpt to start from, or rl_last.ckpt to resume")
    rl.set_defaults(handler=cmd_rl)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = get_run_config(args, {"train.seed": args.seed, "train.max_epochs": args.max_epochs})
    out_dir = get_output_dir(args, "train")
    write_manifest(out_dir, "train", cfg, cfg.train.seed, {
        "best": out_dir / training_service.BEST_CHECKPOINT,
        "last": out_dir / training_service.LAST_CHECKPOINT,
        "log": out_dir / training_service.XE_LOG,
    })
    train, val = get_train_val(args, cfg)
    result = training_service.train_xe(train, val, cfg, out_dir, resume=args.resume)
    logger.info(
        f"train: {result.epochs_run} epochs, best val CIDEr-D {result.best_cider_d} -> {result.best_checkpoint}"
    )
    return 0


def cmd_rl(args: argparse.Namespace) -> int:
    cfg = get_run_config(args, {"train.seed": args.seed, "train.rl_max_epochs": args.max_epochs})
    out_dir = get_output_dir(args, "rl")
    write_manifest(out_dir, "rl", cfg, cfg.train.seed, {
        "source": args.checkpoint,
        "best": out_dir / training_service.RL_BEST_CHECKPOINT,
        "last": out_dir / training_service.RL_LAST_CHECKPOINT,
        "log": out_dir / training_service.RL_LOG,
    })
    train, val = get_train_val(args, cfg)
    result = training_service.train_rl(train, val, cfg, args.checkpoint, out_dir)
    logger.info(f"rl: {result.epochs_run} epochs, best val CIDEr-D {result.best_cider_d} -> {result.best_checkpoint}")
    return 0
