"""
Pairwise box relations and the geometric attention bias derived from them.

Flow:
  1. pairwise_geometry: four relation features per ordered pair of boxes.
  2. relation_embedding: fixed sinusoid expansion of each feature to d_model / 4 values.
  3. GeometryProjection: learned w_G maps each pair embedding to one non-negative
     weight per head (ReLU).
"""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.core.exceptions import ConfigError
from src.domain.run_models import GeometryKind
from src.domain.scene_models import Box
from src.infra.numeric import ops
from src.infra.numeric.module import Module, xavier_uniform
from src.infra.numeric.tensor import Tensor

logger = logging.getLogger(__name__)

RATIO_EPS = 1e-6
LOG_CLIP = 20.0


class GeometryMatrix(BaseModel):
    """Relation features and per-head bias weights for one scene (numpy views, no graph)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    xi: np.ndarray
    eta_g: np.ndarray


def background_box(image_w: float, image_h: float) -> Box:
    return Box(x=image_w / 2.0, y=image_h / 2.0, w=float(image_w), h=float(image_h))


def _log_ratio(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Difference of clamped logs keeps xi(a,b) == -xi(b,a) exactly
    la = np.log(np.maximum(a, RATIO_EPS))
    lb = np.log(np.maximum(b, RATIO_EPS))
    return np.clip(la[:, None] - lb[None, :], -LOG_CLIP, LOG_CLIP)


def pairwise_geometry(boxes: Sequence[Box], kind: GeometryKind = GeometryKind.RATIO) -> np.ndarray:
    """
    Relation features xi[a, b] for every ordered pair.

    ratio: (log x_a/x_b, log y_a/y_b, log w_a/w_b, log h_a/h_b)
    l1:    (log(1 + |x_a - x_b| / w_a), log(1 + |y_a - y_b| / h_a), log w_a/w_b, log h_a/h_b)

    Returns:
        Array [N x N x 4]
    """
    coords = np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)
    x, y, w, h = coords.T
    size_terms = [_log_ratio(w, w), _log_ratio(h, h)]

    if kind == GeometryKind.RATIO:
        center_terms = [_log_ratio(x, x), _log_ratio(y, y)]
    else:
        wa = np.maximum(w, RATIO_EPS)[:, None]
        ha = np.maximum(h, RATIO_EPS)[:, None]
        center_terms = [
            np.clip(np.log1p(np.abs(x[:, None] - x[None, :]) / wa), -LOG_CLIP, LOG_CLIP),
            np.clip(np.log1p(np.abs(y[:, None] - y[None, :]) / ha), -LOG_CLIP, LOG_CLIP),
        ]
    return np.stack(center_terms + size_terms, axis=-1)


def relation_embedding(xi: np.ndarray, d_model: int, wave_len: float = 1000.0, scale: float = 100.0) -> np.ndarray:
    """
    Sinusoid embedding of every relation component, concatenated to d_model.

    Each of the 4 components uses d_model / 8 frequencies with a sin and a cos.

    Raises:
        ConfigError: If d_model is not divisible by 8
    """
    if d_model % 8 != 0:
        raise ConfigError(f"Relation embedding needs d_model divisible by 8, got {d_model}")
    n_freq = d_model // 8
    freqs = wave_len ** (np.arange(n_freq) / n_freq)
    angles = scale * xi[..., None] / freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return emb.reshape(*xi.shape[:-1], d_model)


class GeometryProjection(Module):
    """w_G: one learned d_model-vector per geometry head."""

    def __init__(self, rng: np.random.Generator, d_model: int, geo_heads: int):
        self.w_g = Tensor(xavier_uniform(rng, d_model, geo_heads), requires_grad=True)
        self.d_model = d_model
        self.geo_heads = geo_heads


def geometry_weights(
    xi: np.ndarray,
    projection: GeometryProjection,
    heads: int,
    wave_len: float = 1000.0,
    scale: float = 100.0,
) -> list[Tensor]:
    """
    eta_G = ReLU(Emb(xi) w_G) per head.

    Returns:
        `heads` Tensors [N x N]; with a single shared projection every head gets the same tensor
    """
    n = xi.shape[0]
    emb = relation_embedding(xi, projection.d_model, wave_len, scale).reshape(n * n, projection.d_model)
    eta = ops.relu(ops.matmul(Tensor(emb), projection.w_g))
    per_geo_head = [
        ops.reshape(ops.slice_cols(eta, j, j + 1), (n, n)) for j in range(projection.geo_heads)
    ]
    if projection.geo_heads == 1:
        return per_geo_head * heads
    return per_geo_head


def geometry_matrix(xi: np.ndarray, eta: Optional[list[Tensor]]) -> GeometryMatrix:
    eta_g = np.stack([e.data for e in eta]) if eta else np.zeros((0,) + xi.shape[:2])
    return GeometryMatrix(xi=xi, eta_g=eta_g)
