"""Scene JSONL repository: reading with detection filters, and deterministic writing."""

import json
import logging
from pathlib import Path
from typing import Iterable

from pydantic import ValidationError

from src.core.exceptions import EmptySceneError, SceneParseError, StorageError
from src.domain.scene_models import Box, Proposal, Scene, SceneRecord

logger = logging.getLogger(__name__)

DETECTION_THRESHOLD = 0.7
MAX_OBJECTS = 50


def select_proposals(
    record: SceneRecord,
    threshold: float = DETECTION_THRESHOLD,
    max_objects: int = MAX_OBJECTS,
) -> list[Proposal]:
    """
    Keep proposals with prob strictly above threshold; past max_objects, keep the
    most probable ones (earlier lines win ties). Survivors stay in file order.
    """
    kept = [p for p in record.proposals if p.prob > threshold]
    if len(kept) > max_objects:
        ranked = sorted(range(len(kept)), key=lambda i: -kept[i].prob)[:max_objects]
        kept = [kept[i] for i in sorted(ranked)]
    return [
        Proposal(
            box=Box(x=p.x, y=p.y, w=p.w, h=p.h),
            class_word=p.class_word,
            class_prob=p.prob,
            feature=p.feature,
        )
        for p in kept
    ]


class SceneRepository:
    """Repository for scene JSONL files."""

    def __init__(self, threshold: float = DETECTION_THRESHOLD, max_objects: int = MAX_OBJECTS):
        self.threshold = threshold
        self.max_objects = max_objects

    def load(self, path: Path) -> list[Scene]:
        """
        Parse every line, apply the detection filters and build Scenes.

        Raises:
            SceneParseError: Malformed JSON or fields, with the 1-based line number
            EmptySceneError: A scene with no proposal above the threshold
            StorageError: The file cannot be read
        """
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise StorageError(f"Could not read scenes from {path}: {e}") from e

        scenes: list[Scene] = []
        for line_number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = SceneRecord.model_validate(json.loads(line))
            except json.JSONDecodeError as e:
                raise SceneParseError(str(path), line_number, f"invalid JSON: {e.msg}") from e
            except ValidationError as e:
                raise SceneParseError(str(path), line_number, f"invalid scene: {e.errors()[0]['msg']}") from e

            proposals = select_proposals(record, self.threshold, self.max_objects)
            dropped = len(record.proposals) - len(proposals)
            if dropped:
                logger.debug(f"Scene {record.id}: dropped {dropped} of {len(record.proposals)} proposals")
            if not proposals:
                raise EmptySceneError(record.id)
            try:
                scenes.append(Scene(
                    id=record.id,
                    image_w=record.image_w,
                    image_h=record.image_h,
                    proposals=proposals,
                    background=record.background,
                    refs=record.refs,
                ))
            except ValidationError as e:
                raise SceneParseError(str(path), line_number, f"invalid scene: {e.errors()[0]['msg']}") from e

        logger.info(f"Loaded {len(scenes)} scenes from {path}")
        return scenes

    def save(self, path: Path, scenes: Iterable[Scene]) -> int:
        """Write scenes as JSONL; identical scenes give byte-identical files."""
        path = Path(path)
        count = 0
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding="utf-8", newline="\n") as fh:
                for scene in scenes:
                    fh.write(json.dumps(_scene_line(scene), ensure_ascii=False) + "\n")
                    count += 1
        except OSError as e:
            raise StorageError(f"Could not write scenes to {path}: {e}") from e
        logger.info(f"Wrote {count} scenes to {path}")
        return count


def _scene_line(scene: Scene) -> dict:
    line = SceneRecord.from_scene(scene).model_dump(by_alias=True)
    for key in ("image_w", "image_h"):
        if float(line[key]).is_integer():
            line[key] = int(line[key])
    return line


def load_proposals(path: Path) -> list[Scene]:
    return SceneRepository().load(path)


def write_scenes(path: Path, scenes: Iterable[Scene]) -> int:
    return SceneRepository().save(path, scenes)
