"""
Evaluation and inspection: caption files, score reports and attention dumps.

Flow:
  1. caption: decode every scene with a restored checkpoint, write a candidates JSONL.
  2. eval: join candidates with scene references by id, write the EvalReport JSON.
  3. attn-dump: teacher-force one scene with recording on and write the attention,
     geometry and label-gate matrices as long-format CSV.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from src.core.exceptions import InputError, SceneParseError, StorageError
from src.domain.caption_models import CaptionRecord, EvalReport
from src.domain.scene_models import Scene
from src.infra.latgeo_core.model import LatgeoModel
from src.infra.numeric.tensor import no_grad
from src.services.decode_service import caption_scenes, greedy
from src.services.metrics_service import CiderD, score_all

logger = logging.getLogger(__name__)

ATTENTION_FIELDS = ["module", "layer", "memory", "head", "query", "key", "weight"]
GEOMETRY_FIELDS = ["head", "query", "key", "xi_x", "xi_y", "xi_w", "xi_h", "eta_g"]
GATE_FIELDS = ["token", "feature", "gate"]


class AttentionDump(BaseModel):
    attention_csv: str
    geometry_csv: Optional[str] = None
    gate_csv: Optional[str] = None
    attention_rows: int
    caption: str


# --- Candidate files ---

def write_candidates(path: Path, captions: Mapping[str, str]) -> int:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for image_id in sorted(captions):
                record = CaptionRecord(id=image_id, caption=captions[image_id])
                fh.write(json.dumps(record.model_dump(), ensure_ascii=False) + "\n")
    except OSError as e:
        raise StorageError(f"Could not write captions to {path}: {e}") from e
    logger.info(f"Wrote {len(captions)} captions to {path}")
    return len(captions)


def read_candidates(path: Path) -> dict[str, str]:
    """
    Read a candidates JSONL ({"id", "caption"} per line).

    Raises:
        SceneParseError: Malformed line or duplicate id
        StorageError: The file cannot be read
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise StorageError(f"Could not read candidates from {path}: {e}") from e

    captions: dict[str, str] = {}
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = CaptionRecord.model_validate_json(line)
        except ValidationError as e:
            raise SceneParseError(str(path), line_number, f"invalid caption record: {e.errors()[0]['msg']}") from e
        if record.id in captions:
            raise SceneParseError(str(path), line_number, f"duplicate id '{record.id}'")
        captions[record.id] = record.caption
    return captions


def caption_corpus(
    model: LatgeoModel,
    scenes: Sequence[Scene],
    beam_size: int = 5,
    length_alpha: Optional[float] = None,
) -> dict[str, str]:
    model.eval()
    progress = logger.isEnabledFor(logging.INFO)
    return caption_scenes(model, scenes, model.vocab, beam_size, length_alpha, progress=progress)


# --- Scoring ---

def evaluate(candidates: Mapping[str, str], scenes: Sequence[Scene]) -> EvalReport:
    """
    Score candidates against the references stored with the scenes.

    Raises:
        InputError: If ids differ or a scene has no references
    """
    references = {s.id: list(s.refs) for s in scenes}
    empty = sorted(i for i, refs in references.items() if not refs)
    if empty:
        raise InputError(f"Scenes without reference captions: {empty[:5]}")
    scores = score_all(candidates, references, CiderD(references))

    per_image: dict[str, dict[str, float]] = {image_id: {} for image_id in sorted(candidates)}
    for metric, score in scores.items():
        for image_id, value in score.per_image.items():
            per_image[image_id][metric] = value

    report = EvalReport(
        bleu1=scores["bleu1"].value,
        bleu2=scores["bleu2"].value,
        bleu3=scores["bleu3"].value,
        bleu4=scores["bleu4"].value,
        rougeL=scores["rougeL"].value,
        ciderD=scores["ciderD"].value,
        per_image=per_image,
    )
    logger.info(
        f"BLEU-1 {report.bleu1:.4f} BLEU-4 {report.bleu4:.4f} ROUGE-L {report.rougeL:.4f} "
        f"CIDEr-D {report.ciderD:.4f} over {len(candidates)} images"
    )
    return report


def write_report(path: Path, report: EvalReport) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Could not write report to {path}: {e}") from e


# --- Attention dumps ---

AttentionBlock = tuple[str, int, Optional[int], list[np.ndarray]]


def _recorded_blocks(model: LatgeoModel) -> list[AttentionBlock]:
    """(module, layer, encoder memory read or None, per-head weights) for every recorded block."""
    blocks: list[AttentionBlock] = [
        ("encoder", n, None, list(layer.attention.last_weights))
        for n, layer in enumerate(model.encoder.layers, start=1)
    ]
    for n, layer in enumerate(model.decoder.layers, start=1):
        blocks.append(("decoder_self", n, None, list(layer.self_attention.last_weights)))
        blocks.extend(("cross", n, memory, weights) for memory, weights in layer.last_cross)
    if model.label_attention is not None:
        blocks.append(("label", 1, None, list(model.label_attention.attention.last_weights)))
    return blocks


def _write_rows(path: Path, fields: list[str], rows) -> int:
    count = 0
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow(row)
            count += 1
    return count


def _matrix_rows(module: str, layer: int, memory: Optional[int], weights: Sequence[np.ndarray]):
    memory_cell = "" if memory is None else memory
    for head, matrix in enumerate(weights):
        for query, key in np.ndindex(*matrix.shape):
            yield module, layer, memory_cell, head, query, key, repr(float(matrix[query, key]))


def dump_attention(
    model: LatgeoModel,
    scene: Scene,
    out_dir: Path,
    prefix: Optional[list[int]] = None,
) -> AttentionDump:
    """
    Record every attention map for one scene and write them as CSV rows.

    The decoder runs on `prefix`, or on the greedy caption when none is given.
    Rows per block are heads x queries x keys, memory slots included. Blocks
    are encoder self-attention, decoder self-attention, one cross-attention
    block per mesh branch (`memory` names the encoder layer it reads) and the
    label block.

    Returns:
        Paths written and the attention row count
    """
    out_dir = Path(out_dir)
    model.eval()
    if prefix is None:
        hypothesis = greedy(model, scene)
        prefix = hypothesis.tokens[:-1] if hypothesis.finished else hypothesis.tokens
    caption = model.vocab.decode(prefix)

    model.record_attention(True)
    try:
        with no_grad():
            encoded = model.encode(scene)
            model.decode(encoded, prefix)
        blocks = _recorded_blocks(model)
    finally:
        model.record_attention(False)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        attention_path = out_dir / f"{scene.id}_attention.csv"
        rows = _write_rows(
            attention_path,
            ATTENTION_FIELDS,
            (row for block in blocks for row in _matrix_rows(*block)),
        )

        geometry_path = None
        if encoded.geometry is not None:
            geometry_path = out_dir / f"{scene.id}_geometry.csv"
            xi, eta = encoded.geometry.xi, encoded.geometry.eta_g
            _write_rows(
                geometry_path,
                GEOMETRY_FIELDS,
                (
                    (head, a, b, *(repr(float(v)) for v in xi[a, b]), repr(float(eta[head, a, b])))
                    for head in range(eta.shape[0])
                    for a, b in np.ndindex(*xi.shape[:2])
                ),
            )

        gate_path = None
        if encoded.gate is not None:
            gate_path = out_dir / f"{scene.id}_label_gate.csv"
            gate = encoded.gate.data
            _write_rows(
                gate_path,
                GATE_FIELDS,
                ((token, feature, repr(float(gate[token, feature]))) for token, feature in np.ndindex(*gate.shape)),
            )
    except OSError as e:
        raise StorageError(f"Could not write attention dump to {out_dir}: {e}") from e

    logger.info(f"Dumped {rows} attention weights for scene {scene.id} to {attention_path}")
    return AttentionDump(
        attention_csv=str(attention_path),
        geometry_csv=str(geometry_path) if geometry_path else None,
        gate_csv=str(gate_path) if gate_path else None,
        attention_rows=rows,
        caption=caption,
    )


def expected_attention_rows(model: LatgeoModel, scene: Scene, prefix_len: int) -> int:
    """Row count dump_attention writes for a decoder prefix of prefix_len tokens."""
    cfg = model.config
    n = len(scene.proposals) + int(cfg.use_background)
    m = cfg.memory_slots
    total = cfg.layers * cfg.heads * n * (n + m)
    total += len(model.decoder.layers) * cfg.heads * prefix_len * prefix_len
    total += sum(len(layer.gates) for layer in model.decoder.layers) * cfg.heads * prefix_len * n
    if model.label_attention is not None:
        p = len(scene.proposals)
        total += cfg.heads * p * p
    return total
