"""Shared inputs for command handlers: config resolution, scene and checkpoint loading, manifests."""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from src.core.config import get_settings, resolve_run_config
from src.core.exceptions import InputError, StorageError
from src.core.rng import SeedStreams
from src.domain.run_models import RunConfig, RunManifest
from src.domain.scene_models import Scene
from src.infra.checkpoint_repo import load_checkpoint
from src.infra.latgeo_core.model import LatgeoModel
from src.infra.scene_repo import SceneRepository
from src.services.training_service import restore_model, split_corpus

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def parse_assignments(pairs: Optional[list[str]]) -> dict[str, Any]:
    """
    `--set section.field=value` flags as flat dotted overrides.
    Values are parsed as JSON when possible, otherwise kept as strings.

    Raises:
        InputError: If a pair has no '='
    """
    overrides: dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise InputError(f"--set expects key=value, got '{pair}'")
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


def get_run_config(args: argparse.Namespace, flag_overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """defaults (settings seed) < --config file < --set pairs < dedicated flags."""
    settings = get_settings()
    defaults = {"train.seed": settings.default_seed, "synth.seed": settings.default_seed}
    overrides = {**parse_assignments(getattr(args, "set", None)), **(flag_overrides or {})}
    return resolve_run_config(getattr(args, "config", None), overrides, defaults)


def get_output_dir(args: argparse.Namespace, command: str) -> Path:
    out = getattr(args, "out", None)
    return Path(out) if out else get_settings().artifacts_dir / command


def get_scenes(path: Path, cfg: Optional[RunConfig] = None) -> list[Scene]:
    synth = cfg.synth if cfg is not None else None
    repo = SceneRepository(synth.prob_threshold, synth.max_objects) if synth else SceneRepository()
    return repo.load(Path(path))


def get_train_val(args: argparse.Namespace, cfg: RunConfig) -> tuple[list[Scene], list[Scene]]:
    """Scenes from --data, and --val when given; otherwise a seeded split of --data."""
    scenes = get_scenes(args.data, cfg)
    if getattr(args, "val", None):
        return scenes, get_scenes(args.val, cfg)
    train, val = split_corpus(scenes, cfg.train.val_fraction, SeedStreams(cfg.train.seed))
    logger.info(f"Split {len(scenes)} scenes into {len(train)} train / {len(val)} val")
    return train, val


def get_model(checkpoint_path: Path) -> LatgeoModel:
    return restore_model(load_checkpoint(Path(checkpoint_path)))


def write_manifest(
    out_dir: Path,
    command: str,
    cfg: RunConfig,
    seed: int,
    artifacts: Optional[dict[str, Any]] = None,
    name: str = MANIFEST_NAME,
) -> RunManifest:
    """
    Write the manifest (default manifest.json) into out_dir before the run starts.

    Raises:
        StorageError: If the directory or file cannot be written
    """
    manifest = RunManifest(
        command=command,
        argv=sys.argv[1:],
        config=cfg,
        seed=seed,
        started_at=datetime.now(timezone.utc),
        artifacts=artifacts or {},
    )
    path = Path(out_dir) / name
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Could not write manifest {path}: {e}") from e
    logger.info(f"Manifest written to {path}")
    return manifest
