"""Shared fixtures: micro models, hand-built scenes and small synthetic corpora."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the app directory to the path so `src.` imports resolve
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.config import get_settings
from src.core.rng import SeedStreams
from src.domain.run_models import ModelConfig, RunConfig, SynthConfig, TrainConfig
from src.domain.scene_models import Box, Proposal, Scene
from src.infra.latgeo_core.factory import build_model
from src.services.gradcheck_service import micro_config, micro_scene, micro_vocabulary
from src.services.synth_service import generate_corpus


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Every test sees settings built from its own environment."""
    monkeypatch.delenv("LATGEO_THREADS", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def vocab():
    return micro_vocabulary()


@pytest.fixture
def make_model(vocab):
    """Build an eval-mode micro model; keyword arguments override ModelConfig fields."""
    def _make(seed: int = 0, **overrides):
        return build_model(micro_config(**overrides), vocab, SeedStreams(seed)).eval()
    return _make


@pytest.fixture
def scene():
    return micro_scene(np.random.default_rng(3))


def make_scene(boxes, words=None, d_feat: int = 8, scene_id: str = "hand", seed: int = 0) -> Scene:
    """Scene with the given (x, y, w, h) boxes on a 100x100 image and random features."""
    rng = np.random.default_rng(seed)
    words = words or ["cat"] * len(boxes)
    return Scene(
        id=scene_id,
        image_w=100.0,
        image_h=100.0,
        proposals=[
            Proposal(box=Box(x=x, y=y, w=w, h=h), class_word=word, class_prob=0.9,
                     feature=rng.standard_normal(d_feat).tolist())
            for (x, y, w, h), word in zip(boxes, words)
        ],
        background=rng.standard_normal(d_feat).tolist(),
        refs=["a cat"],
    )


@pytest.fixture
def synth_config():
    return SynthConfig(n_scenes=8, seed=0, objects_min=1, objects_max=3, n_classes=4, d_feat=8)


@pytest.fixture
def corpus(synth_config):
    return generate_corpus(synth_config)


@pytest.fixture
def tiny_run_config():
    """Smallest configuration that trains end to end in well under a second per epoch."""
    return RunConfig(
        model=ModelConfig(d_model=16, heads=2, layers=1, memory_slots=2, d_feat=8, max_len=16, dropout=0.0),
        train=TrainConfig(
            seed=0, warmup=10, batch_size=4, max_epochs=1, rl_max_epochs=1,
            refs_per_scene=1, min_count=0, beam_size=2, patience=1,
        ),
        synth=SynthConfig(n_scenes=8, d_feat=8, objects_max=3, n_classes=4),
    )


@pytest.fixture
def scene_factory():
    return make_scene
