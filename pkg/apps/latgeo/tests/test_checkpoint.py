import struct

import numpy as np
import pytest

from src.core.exceptions import CheckpointError
from src.core.rng import SeedStreams
from src.domain.caption_models import TrainState
from src.infra.checkpoint_repo import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from src.infra.numeric.optim import OptimizerState
from src.services.training_service import restore_model


@pytest.fixture
def checkpoint(make_model):
    model = make_model(seed=4)
    streams = SeedStreams(4)
    streams.get("dropout").random(3)
    return Checkpoint(
        model=model.config,
        vocab=model.vocab,
        state=TrainState(epoch=3, step=12, best_cider_d=1.25, best_epoch=2, epochs_without_improvement=1),
        rng_state=streams.state(),
        parameters=model.state_dict(),
        optimizer=OptimizerState(
            m={"visual.weight": np.full((8, 16), 0.5)},
            v={"visual.weight": np.full((8, 16), 0.25)},
            t=12,
        ),
    )


def test_round_trip_is_bit_identical(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    loaded = load_checkpoint(path)

    assert loaded.parameters.keys() == checkpoint.parameters.keys()
    for name, array in checkpoint.parameters.items():
        assert loaded.parameters[name].tobytes() == array.tobytes()
    assert loaded.model == checkpoint.model
    assert loaded.vocab.words == checkpoint.vocab.words
    assert loaded.state == checkpoint.state
    assert loaded.optimizer.t == 12
    assert np.array_equal(loaded.optimizer.v["visual.weight"], checkpoint.optimizer.v["visual.weight"])


def test_restored_rng_continues_the_same_stream(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    expected = SeedStreams(4)
    expected.get("dropout").random(3)

    restored = SeedStreams(4)
    restored.restore(load_checkpoint(path).rng_state)
    assert np.array_equal(restored.get("dropout").random(5), expected.get("dropout").random(5))


def test_restored_model_matches_saved_parameters(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    model = restore_model(load_checkpoint(path))
    assert not model.training
    for name, array in model.state_dict().items():
        assert np.array_equal(array, checkpoint.parameters[name])


def test_corrupt_magic_is_rejected(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_version_mismatch_is_rejected(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, len(MAGIC), 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_truncated_file_is_rejected(tmp_path, checkpoint):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw[:6])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_loading_into_another_shape_lists_offending_tensors(checkpoint, make_model):
    wider = make_model(d_model=24, heads=2)
    with pytest.raises(CheckpointError) as exc:
        wider.load_state_dict(checkpoint.parameters)
    assert "visual.weight (8, 16) != (8, 24)" in exc.value.offending


def test_environment_sets_the_accepted_version(tmp_path, checkpoint, monkeypatch):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    monkeypatch.setenv("LATGEO_CHECKPOINT_VERSION", "2")
    from src.core.config import get_settings
    get_settings.cache_clear()
    with pytest.raises(CheckpointError, match="expected 2"):
        load_checkpoint(path)
