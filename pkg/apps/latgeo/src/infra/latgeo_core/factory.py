"""Factory for building LatgeoModel instances from a config and a vocabulary."""

import logging

from src.core.rng import SeedStreams
from src.domain.run_models import ModelConfig
from src.domain.scene_models import Vocabulary
from src.infra.latgeo_core.model import LatgeoModel

logger = logging.getLogger(__name__)


def build_model(cfg: ModelConfig, vocab: Vocabulary, streams: SeedStreams) -> LatgeoModel:
    """
    Create a freshly initialized model.

    Weights are drawn from the "init" stream and dropout from the "dropout"
    stream, so two builds from equal seeds are bit-identical.

    Returns:
        LatgeoModel in training mode
    """
    model = LatgeoModel(cfg, vocab, streams.get("init"))
    model.dropout_rng = streams.get("dropout")
    logger.info(
        f"Built model: d_model={cfg.d_model} heads={cfg.heads} layers={cfg.layers} "
        f"M={cfg.memory_slots} V={len(vocab)} connectivity={cfg.connectivity.value} "
        f"geometry={cfg.geometry_kind.value if cfg.use_geometry else 'off'} lam={cfg.use_lam} "
        f"background={cfg.use_background} params={model.parameter_count()}"
    )
    return model
