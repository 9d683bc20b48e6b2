"""Captioning, scoring and attention inspection commands."""

import argparse
import logging
from pathlib import Path

from src.core.dependencies import get_model, get_output_dir, get_run_config, get_scenes, write_manifest
from src.core.exceptions import InputError
from src.domain.run_models import RunConfig
from src.infra.checkpoint_repo import load_checkpoint
from src.services import evaluation_service
from src.services.training_service import restore_model

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    caption = subparsers.add_parser("caption", help="Decode captions for every scene")
    caption.add_argument("--data", type=Path, required=True, help="Scenes JSONL")
    caption.add_argument("--checkpoint", type=Path, required=True)
    caption.add_argument("--out", type=Path, required=True, help="Candidates JSONL to write")
    caption.add_argument("--beam", type=int, help="Beam width (1 = greedy); default from the checkpoint")
    caption.add_argument("--length-alpha", type=float, help="Wu length normalization exponent")
    caption.set_defaults(handler=cmd_caption)

    evaluate = subparsers.add_parser("eval", help="Score candidates against scene references")
    evaluate.add_argument("--candidates", type=Path, required=True, help="Candidates JSONL")
    evaluate.add_argument("--data", type=Path, required=True, help="Scenes JSONL holding the references")
    evaluate.add_argument("--out", type=Path, required=True, help="Scores JSON to write")
    evaluate.set_defaults(handler=cmd_eval)

    dump = subparsers.add_parser("attn-dump", help="Write attention, geometry and label-gate matrices as CSV")
    dump.add_argument("--data", type=Path, required=True, help="Scenes JSONL")
    dump.add_argument("--checkpoint", type=Path, required=True)
    dump.add_argument("--scene", help="Scene id (default: first scene)")
    dump.add_argument("--out", type=Path, help="Output directory")
    dump.set_defaults(handler=cmd_attn_dump)


def cmd_caption(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    train_cfg = checkpoint.train.model_copy(update={
        key: value
        for key, value in {"beam_size": args.beam, "length_alpha": args.length_alpha}.items()
        if value is not None
    })
    cfg = RunConfig(model=checkpoint.model, train=train_cfg)
    out = Path(args.out)
    write_manifest(out.parent, "caption", cfg, train_cfg.seed, {"checkpoint": args.checkpoint, "captions": out},
                   name=f"{out.stem}.manifest.json")

    model = restore_model(checkpoint)
    scenes = get_scenes(args.data)
    captions = evaluation_service.caption_corpus(model, scenes, train_cfg.beam_size, train_cfg.length_alpha)
    evaluation_service.write_candidates(out, captions)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = get_run_config(args)
    out = Path(args.out)
    write_manifest(out.parent, "eval", cfg, cfg.train.seed, {"candidates": args.candidates, "scores": out},
                   name=f"{out.stem}.manifest.json")
    candidates = evaluation_service.read_candidates(args.candidates)
    report = evaluation_service.evaluate(candidates, get_scenes(args.data))
    evaluation_service.write_report(out, report)
    return 0


def cmd_attn_dump(args: argparse.Namespace) -> int:
    model = get_model(args.checkpoint)
    scenes = get_scenes(args.data)
    if not scenes:
        raise InputError(f"{args.data} holds no scenes")
    if args.scene is None:
        scene = scenes[0]
    else:
        matches = [s for s in scenes if s.id == args.scene]
        if not matches:
            raise InputError(f"Scene '{args.scene}' not found in {args.data}")
        scene = matches[0]

    cfg = get_run_config(args)
    out_dir = get_output_dir(args, "attn-dump")
    write_manifest(out_dir, "attn-dump", cfg, cfg.train.seed, {"checkpoint": args.checkpoint, "scene": scene.id})
    dump = evaluation_service.dump_attention(model, scene, out_dir)
    logger.info(f"attn-dump: {dump.attention_rows} rows for '{dump.caption}'")
    return 0
