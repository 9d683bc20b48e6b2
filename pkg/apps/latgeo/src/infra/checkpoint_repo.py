"""
Binary checkpoint files.

Layout (little-endian):
    b"LATG" | u32 version | u64 metadata length | UTF-8 JSON metadata | f64 tensor data

The metadata holds the configs, vocabulary, training state, RNG states and a
tensor manifest of (name, shape, byte offset into the data block). Optimizer
moments are stored as tensors named "optim.m.<param>" and "optim.v.<param>".
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.core.config import get_settings
from src.core.exceptions import CheckpointError
from src.domain.caption_models import TrainState
from src.domain.run_models import ModelConfig, TrainConfig
from src.domain.scene_models import Vocabulary
from src.infra.numeric.optim import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"LATG"
_HEADER = struct.Struct("<4sIQ")
_M_PREFIX, _V_PREFIX = "optim.m.", "optim.v."


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    version: int = Field(default_factory=lambda: get_settings().checkpoint_version)
    model: ModelConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    vocab: Vocabulary
    state: TrainState = Field(default_factory=TrainState)
    rng_state: dict[str, Any] = Field(default_factory=dict)
    parameters: dict[str, np.ndarray]
    optimizer: Optional[OptimizerState] = None


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """
    Write a checkpoint atomically (temp file + rename).

    Raises:
        CheckpointError: If the file cannot be written
    """
    path = Path(path)
    tensors: list[tuple[str, np.ndarray]] = list(checkpoint.parameters.items())
    optimizer_meta = None
    if checkpoint.optimizer is not None:
        opt = checkpoint.optimizer
        tensors += [(_M_PREFIX + k, v) for k, v in opt.m.items()]
        tensors += [(_V_PREFIX + k, v) for k, v in opt.v.items()]
        optimizer_meta = {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}

    manifest, blobs, offset = [], [], 0
    for name, array in tensors:
        blob = np.ascontiguousarray(array, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(array)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    metadata = {
        "version": checkpoint.version,
        "model_config": checkpoint.model.model_dump(mode="json"),
        "train_config": checkpoint.train.model_dump(mode="json"),
        "vocab": checkpoint.vocab.model_dump(mode="json"),
        "train_state": checkpoint.state.model_dump(mode="json"),
        "rng_state": checkpoint.rng_state,
        "optimizer": optimizer_meta,
        "tensors": manifest,
    }
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tmp.open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, checkpoint.version, len(meta_bytes)))
            fh.write(meta_bytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"Could not write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} ({len(manifest)} tensors, {offset} data bytes)")


def load_checkpoint(path: Path, expected_version: Optional[int] = None) -> Checkpoint:
    """
    Read and validate a checkpoint.

    Raises:
        CheckpointError: Unreadable file, bad magic, version mismatch, truncation, or bad metadata
    """
    path = Path(path)
    expected_version = expected_version if expected_version is not None else get_settings().checkpoint_version
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e

    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != expected_version:
        raise CheckpointError(f"{path}: format version {version}, expected {expected_version}")
    data_start = _HEADER.size + meta_len
    if data_start > len(raw):
        raise CheckpointError(f"{path}: truncated metadata")

    try:
        meta = json.loads(raw[_HEADER.size:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata: {e}") from e

    data = memoryview(raw)[data_start:]
    arrays: dict[str, np.ndarray] = {}
    for entry in meta.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, end = entry["offset"], entry["offset"] + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor data", [entry["name"]])
        arrays[entry["name"]] = np.frombuffer(data[start:end], dtype="<f8").astype(np.float64).reshape(shape)

    optimizer = None
    if meta.get("optimizer") is not None:
        optimizer = OptimizerState(
            m={k[len(_M_PREFIX):]: v for k, v in arrays.items() if k.startswith(_M_PREFIX)},
            v={k[len(_V_PREFIX):]: v for k, v in arrays.items() if k.startswith(_V_PREFIX)},
            **meta["optimizer"],
        )
    parameters = {k: v for k, v in arrays.items() if not k.startswith(("optim.m.", "optim.v."))}

    try:
        checkpoint = Checkpoint(
            version=version,
            model=ModelConfig.model_validate(meta["model_config"]),
            train=TrainConfig.model_validate(meta["train_config"]),
            vocab=Vocabulary.model_validate(meta["vocab"]),
            state=TrainState.model_validate(meta["train_state"]),
            rng_state=meta.get("rng_state", {}),
            parameters=parameters,
            optimizer=optimizer,
        )
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid metadata: {e}") from e
    logger.info(f"Loaded checkpoint {path} (phase={checkpoint.state.phase}, epoch={checkpoint.state.epoch})")
    return checkpoint
