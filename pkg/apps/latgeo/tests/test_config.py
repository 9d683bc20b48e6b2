import argparse
import json

import pytest
from pydantic import ValidationError

from src.core.config import Settings, get_settings, resolve_run_config
from src.core.dependencies import get_run_config, parse_assignments
from src.core.exceptions import ConfigError, InputError
from src.domain.run_models import Connectivity, ModelConfig, RolloutKind


def write_config(tmp_path, values):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(values), encoding="utf-8")
    return path


def test_defaults_file_and_overrides_take_precedence_in_order(tmp_path):
    path = write_config(tmp_path, {"train.seed": 2, "model.d_model": 32, "model.heads": 4})
    cfg = resolve_run_config(path, {"train.seed": 3, "model.layers": None}, {"train.seed": 1, "synth.seed": 1})
    assert cfg.train.seed == 3
    assert cfg.synth.seed == 1
    assert cfg.model.d_model == 32
    assert cfg.model.layers == ModelConfig().layers


def test_file_values_are_coerced_to_config_types(tmp_path):
    path = write_config(tmp_path, {"model.connectivity": "skipped", "train.rl_rollout": "sample"})
    cfg = resolve_run_config(path)
    assert cfg.model.connectivity is Connectivity.SKIPPED
    assert cfg.train.rl_rollout is RolloutKind.SAMPLE


@pytest.mark.parametrize("values", [
    {"optim.lr": 0.1},
    {"model.width": 32},
    {"seed": 1},
    {"model.d_model": 30, "model.heads": 4},
])
def test_invalid_configs_are_rejected(tmp_path, values):
    with pytest.raises(ConfigError):
        resolve_run_config(write_config(tmp_path, values))


def test_unreadable_config_files(tmp_path):
    with pytest.raises(ConfigError):
        resolve_run_config(tmp_path / "absent.json")
    path = tmp_path / "list.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="JSON object"):
        resolve_run_config(path)


def test_parse_assignments_reads_json_values():
    parsed = parse_assignments(["model.d_model=32", "train.rl_rollout=sample", "model.use_lam=false"])
    assert parsed == {"model.d_model": 32, "train.rl_rollout": "sample", "model.use_lam": False}
    assert parse_assignments(None) == {}
    with pytest.raises(InputError):
        parse_assignments(["model.d_model"])


def test_dedicated_flags_beat_set_pairs():
    args = argparse.Namespace(set=["train.seed=4", "train.max_epochs=9"], config=None)
    cfg = get_run_config(args, {"train.seed": 7, "train.max_epochs": None})
    assert cfg.train.seed == 7
    assert cfg.train.max_epochs == 9


def test_settings_seed_is_the_default(monkeypatch):
    monkeypatch.setenv("LATGEO_DEFAULT_SEED", "11")
    get_settings.cache_clear()
    cfg = get_run_config(argparse.Namespace())
    assert cfg.train.seed == 11
    assert cfg.synth.seed == 11


def test_log_level_from_environment(monkeypatch):
    monkeypatch.setenv("LATGEO_LOG_LEVEL", "debug")
    assert Settings().log_level == "DEBUG"
    monkeypatch.setenv("LATGEO_LOG_LEVEL", "chatty")
    with pytest.raises(ValidationError):
        Settings()


def test_settings_are_cached():
    assert get_settings() is get_settings()


def test_full_scale_config_with_override():
    cfg = ModelConfig.full_scale(layers=6)
    assert (cfg.d_model, cfg.heads, cfg.memory_slots, cfg.d_feat, cfg.max_len) == (512, 8, 40, 2048, 22)
    assert cfg.layers == 6
    assert cfg.geo_heads == 8
