"""The captioning network: visual tokens -> geometry-biased encoder -> label gate -> meshed decoder."""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.core.exceptions import ConfigError, ContractError
from src.domain.run_models import ModelConfig
from src.domain.scene_models import START, Scene, Vocabulary
from src.infra.latgeo_core.attention import MultiHeadAttention, causal_mask
from src.infra.latgeo_core.connectivity import ConnectivityPlan, build_connectivity
from src.infra.latgeo_core.decoder import Decoder, DecoderLayer
from src.infra.latgeo_core.encoder import Encoder
from src.infra.latgeo_core.geometry import (
    GeometryMatrix,
    GeometryProjection,
    background_box,
    geometry_matrix,
    geometry_weights,
    pairwise_geometry,
)
from src.infra.latgeo_core.label_attention import (
    LabelAttention,
    LabelSet,
    gate_encoder_outputs,
    labels_embed,
    rank_labels,
)
from src.infra.numeric import ops
from src.infra.numeric.module import Embedding, Linear, Module
from src.infra.numeric.tensor import Tensor

logger = logging.getLogger(__name__)


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Rows for positions 1..max_len: PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...)."""
    if d_model % 2:
        raise ConfigError(f"Positional encoding needs an even d_model, got {d_model}")
    positions = np.arange(1, max_len + 1, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(positions / rates)
    pe[:, 1::2] = np.cos(positions / rates)
    return pe


def scene_inputs(scene: Scene, use_background: bool) -> np.ndarray:
    feats = scene.features()
    if use_background:
        feats = np.vstack([feats, np.asarray(scene.background, dtype=np.float64)[None, :]])
    return feats


def embed_visual(features: np.ndarray, projection: Linear) -> Tensor:
    """
    Project every token feature with the shared W.

    Raises:
        ConfigError: If the feature width is not W's input width
    """
    d_in = projection.weight.shape[0]
    if features.ndim != 2 or features.shape[1] != d_in:
        raise ConfigError(f"Scene features have width {features.shape[-1]}, model expects d_feat={d_in}")
    return projection(Tensor(features))


class EncodedScene(BaseModel):
    """Everything the decoder needs from one scene, plus inspection views."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    memories: list[Tensor]
    encoder_outputs: list[Tensor]
    gate: Optional[Tensor] = None
    geometry: Optional[GeometryMatrix] = None


class LatgeoModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, rng: np.random.Generator):
        if cfg.vocab_size is None:
            cfg = cfg.model_copy(update={"vocab_size": len(vocab)})
        if cfg.vocab_size != len(vocab):
            raise ConfigError(f"vocab_size={cfg.vocab_size} but the vocabulary has {len(vocab)} words")

        self.config = cfg
        self.vocab = vocab
        self.plan: ConnectivityPlan = build_connectivity(cfg)
        d = cfg.d_model

        self.visual = Linear(rng, cfg.d_feat, d, bias=False)
        self.geometry: Optional[GeometryProjection] = (
            GeometryProjection(rng, d, cfg.geo_heads) if cfg.use_geometry else None
        )
        self.encoder = Encoder(rng, cfg, residual=self.plan.residual_encoder)
        self.word_embedding = Embedding(rng, cfg.vocab_size, d)
        self.label_attention: Optional[LabelAttention] = (
            LabelAttention(rng, d, cfg.heads) if cfg.use_lam else None
        )
        self.decoder = Decoder(rng, cfg, self.plan.branches, residual=self.plan.residual_decoder)
        if cfg.tie_embeddings:
            self.output: Optional[Linear] = None
            self.output_bias = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
        else:
            self.output = Linear(rng, d, cfg.vocab_size)
        self.positions = positional_encoding(cfg.max_len, d)
        self.dropout_rng: Optional[np.random.Generator] = None

    @property
    def max_len(self) -> int:
        return self.config.max_len

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def record_attention(self, enabled: bool = True) -> None:
        for module in self.modules():
            if isinstance(module, (MultiHeadAttention, DecoderLayer)):
                module.record = enabled

    def encode(self, scene: Scene) -> EncodedScene:
        cfg = self.config
        tokens = embed_visual(scene_inputs(scene, cfg.use_background), self.visual)

        eta_g, geometry = None, None
        if self.geometry is not None:
            boxes = [p.box for p in scene.proposals]
            if cfg.use_background:
                boxes.append(background_box(scene.image_w, scene.image_h))
            xi = pairwise_geometry(boxes, cfg.geometry_kind)
            eta_g = geometry_weights(xi, self.geometry, cfg.heads, cfg.geo_wave_len, cfg.geo_scale)
            geometry = geometry_matrix(xi, eta_g)

        outputs = self.encoder(tokens, eta_g, self.dropout_rng)

        if self.label_attention is None:
            return EncodedScene(memories=outputs, encoder_outputs=outputs, geometry=geometry)

        l_o = labels_embed([p.class_word for p in scene.proposals], self.vocab, self.word_embedding.table)
        probs = np.array([p.class_prob for p in scene.proposals])
        labels = LabelSet(l_o=l_o, r_o=rank_labels(l_o, probs), probs=probs)
        gate = self.label_attention(labels, cfg.use_background)
        memories = gate_encoder_outputs(outputs, gate, cfg.layers)
        return EncodedScene(memories=memories, encoder_outputs=outputs, gate=gate, geometry=geometry)

    def decode(self, encoded: EncodedScene, prefix: list[int]) -> Tensor:
        """
        Logits [t x V] for every position of a prefix starting with START.

        Raises:
            ContractError: If the prefix is empty, too long, or does not start with START
        """
        t = len(prefix)
        if t == 0 or prefix[0] != START:
            raise ContractError("Decoder prefix must start with START")
        if t > self.config.max_len:
            raise ContractError(f"Prefix of length {t} exceeds max_len={self.config.max_len}")

        y = self.word_embedding(prefix) + Tensor(self.positions[:t])
        y = ops.dropout(y, self.config.dropout, self.dropout_rng, self.training)
        y = self.decoder(y, encoded.memories, causal_mask(t), self.dropout_rng)

        if self.output is not None:
            return self.output(y)
        return ops.add_bias(ops.matmul(y, ops.transpose(self.word_embedding.table)), self.output_bias)

    def forward(self, scene: Scene, prefix: list[int]) -> Tensor:
        return self.decode(self.encode(scene), prefix)

    __call__ = forward
