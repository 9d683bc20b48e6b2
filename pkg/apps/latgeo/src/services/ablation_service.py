"""
Ablation grids: train one model per configuration on a shared corpus and
seed, score it on the validation split and collect one row per configuration.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

from src.core.config import resolve_run_config
from src.core.exceptions import ConfigError, StorageError
from src.domain.caption_models import AblationRow
from src.domain.scene_models import Scene
from src.infra.checkpoint_repo import load_checkpoint
from src.services.evaluation_service import caption_corpus, evaluate
from src.services.training_service import restore_model, train_rl, train_xe

logger = logging.getLogger(__name__)


class GridEntry(BaseModel):
    name: str = Field(..., min_length=1)
    overrides: dict[str, Any] = Field(default_factory=dict, description="Flat dotted config keys")


_BASELINE = {"model.use_geometry": False, "model.use_lam": False, "model.use_background": False}

PRESETS: dict[str, list[GridEntry]] = {
    "modules": [
        GridEntry(name="baseline", overrides=dict(_BASELINE)),
        GridEntry(name="geometry_l1", overrides={**_BASELINE, "model.use_geometry": True, "model.geometry_kind": "l1"}),
        GridEntry(name="geometry_ratio", overrides={**_BASELINE, "model.use_geometry": True}),
        GridEntry(
            name="background_geometry_ratio",
            overrides={**_BASELINE, "model.use_geometry": True, "model.use_background": True},
        ),
        GridEntry(
            name="background_geometry_ratio_lam",
            overrides={"model.use_geometry": True, "model.use_background": True, "model.use_lam": True},
        ),
    ],
    "connectivity": [
        GridEntry(name="fully_connected_l3", overrides={"model.connectivity": "fully_connected", "model.layers": 3}),
        GridEntry(name="single_l3", overrides={"model.connectivity": "single", "model.layers": 3}),
        GridEntry(name="skipped_l3", overrides={"model.connectivity": "skipped", "model.layers": 3}),
        GridEntry(name="residual_encoder_l3", overrides={"model.connectivity": "residual_encoder", "model.layers": 3}),
        GridEntry(name="residual_encdec_l3", overrides={"model.connectivity": "residual_encdec", "model.layers": 3}),
        GridEntry(name="residual_encoder_l6", overrides={"model.connectivity": "residual_encoder", "model.layers": 6}),
        GridEntry(name="residual_encdec_l6", overrides={"model.connectivity": "residual_encdec", "model.layers": 6}),
        GridEntry(name="fully_connected_l6", overrides={"model.connectivity": "fully_connected", "model.layers": 6}),
    ],
}

CSV_FIELDS = list(AblationRow.model_fields)


def load_grid(spec: str) -> list[GridEntry]:
    """
    A preset name, or a JSON file holding a list of flat override dicts.
    An entry's optional "name" key names its row; otherwise rows are numbered.

    Raises:
        ConfigError: Unknown preset or malformed grid file
    """
    if spec in PRESETS:
        return [entry.model_copy(deep=True) for entry in PRESETS[spec]]
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"Grid '{spec}' is neither a preset {sorted(PRESETS)} nor a file")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read grid file {path}: {e}") from e
    if not isinstance(raw, list) or not all(isinstance(item, dict) for item in raw):
        raise ConfigError(f"Grid file {path} must hold a JSON list of objects")

    entries = []
    for index, item in enumerate(raw, start=1):
        item = dict(item)
        name = str(item.pop("name", f"config_{index:02d}"))
        try:
            entries.append(GridEntry(name=name, overrides=item))
        except ValidationError as e:
            raise ConfigError(f"Grid entry {index} in {path}: {e}") from e
    return entries


def run_entry(
    entry: GridEntry,
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    out_dir: Path,
    config_path: Optional[Path] = None,
    base_overrides: Optional[dict[str, Any]] = None,
    with_rl: bool = False,
) -> AblationRow:
    """Train, restore the best checkpoint and score one configuration on the validation scenes."""
    cfg = resolve_run_config(config_path, {**(base_overrides or {}), **entry.overrides})
    run_dir = Path(out_dir) / entry.name

    result = train_xe(train_scenes, val_scenes, cfg, run_dir)
    epochs = result.epochs_run
    best = result.best_checkpoint
    if with_rl:
        rl_result = train_rl(train_scenes, val_scenes, cfg, Path(best), run_dir)
        epochs += rl_result.epochs_run
        best = rl_result.best_checkpoint

    model = restore_model(load_checkpoint(Path(best)))
    report = evaluate(caption_corpus(model, val_scenes, cfg.train.beam_size, cfg.train.length_alpha), val_scenes)
    return AblationRow(
        name=entry.name,
        overrides=entry.overrides,
        parameters=model.parameter_count(),
        epochs=epochs,
        bleu1=report.bleu1,
        bleu2=report.bleu2,
        bleu3=report.bleu3,
        bleu4=report.bleu4,
        rougeL=report.rougeL,
        ciderD=report.ciderD,
    )


def run_grid(
    entries: Sequence[GridEntry],
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    out_dir: Path,
    config_path: Optional[Path] = None,
    base_overrides: Optional[dict[str, Any]] = None,
    with_rl: bool = False,
) -> list[AblationRow]:
    """
    Run every entry in order. A failing configuration becomes a row carrying
    its error message, and the grid moves on. Rows are appended to
    `out_dir/ablation.csv` as they finish.
    """
    out_dir = Path(out_dir)
    table = AblationTable(out_dir / "ablation.csv")
    rows: list[AblationRow] = []
    for index, entry in enumerate(entries, start=1):
        logger.info(f"Ablation {index}/{len(entries)}: {entry.name} {entry.overrides}")
        try:
            row = run_entry(entry, train_scenes, val_scenes, out_dir, config_path, base_overrides, with_rl)
        except Exception as e:
            logger.exception(f"Ablation configuration '{entry.name}' failed")
            row = AblationRow(name=entry.name, overrides=entry.overrides, error=f"{type(e).__name__}: {e}")
        table.append(row)
        rows.append(row)
    failed = sum(1 for r in rows if r.error)
    logger.info(f"Ablation grid finished: {len(rows) - failed} ok, {failed} failed -> {table.path}")
    return rows


class AblationTable:
    """CSV with one row per configuration; overrides are stored as sorted JSON."""

    def __init__(self, path: Path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, fieldnames=CSV_FIELDS).writeheader()
        except OSError as e:
            raise StorageError(f"Could not create ablation table {self.path}: {e}") from e

    def append(self, row: AblationRow) -> None:
        record = row.model_dump()
        record["overrides"] = json.dumps(row.overrides, sort_keys=True)
        try:
            with self.path.open("a", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, fieldnames=CSV_FIELDS).writerow(record)
        except OSError as e:
            raise StorageError(f"Could not append to ablation table {self.path}: {e}") from e
