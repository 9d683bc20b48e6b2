from typing import Optional, Sequence

import numpy as np

from src.domain.run_models import ModelConfig
from src.infra.latgeo_core.attention import MultiHeadAttention
from src.infra.numeric import ops
from src.infra.numeric.module import LayerNorm, Linear, Module
from src.infra.numeric.tensor import Tensor


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, d_inner: int):
        self.inner = Linear(rng, d_model, d_inner)
        self.outer = Linear(rng, d_inner, d_model)

    def __call__(self, x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
        hidden = ops.dropout(ops.relu(self.inner(x)), rate, rng, self.training)
        return self.outer(hidden)


class EncoderLayer(Module):
    """Memory-augmented, geometry-biased self-attention then feed-forward, each with residual + norm."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d = cfg.d_model
        self.attention = MultiHeadAttention(rng, d, cfg.heads, cfg.memory_slots, cfg.eta_floor)
        self.attention_norm = LayerNorm(d, cfg.ln_eps)
        self.feed_forward = FeedForward(rng, d, cfg.ff_mult * d)
        self.ff_norm = LayerNorm(d, cfg.ln_eps)
        self.rate = cfg.dropout

    def __call__(
        self,
        x: Tensor,
        eta_g: Optional[Sequence[Tensor]] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        attended = self.attention(x, x, x, eta_g=eta_g)
        x = self.attention_norm(x + ops.dropout(attended, self.rate, rng, self.training))
        transformed = self.feed_forward(x, self.rate, rng)
        return self.ff_norm(x + ops.dropout(transformed, self.rate, rng, self.training))


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, residual: bool = False):
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.layers)]
        self.residual = residual

    def __call__(
        self,
        tokens: Tensor,
        eta_g: Optional[Sequence[Tensor]] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> list[Tensor]:
        """All L layer outputs E_Out(1..L); with residual, E_Out(l) += E_Out(l-1) for l >= 2."""
        outputs: list[Tensor] = []
        x = tokens
        for index, layer in enumerate(self.layers):
            out = layer(x, eta_g, rng)
            if self.residual and index > 0:
                out = out + x
            outputs.append(out)
            x = out
        return outputs
