from typing import Optional, Sequence

import numpy as np

from src.core.exceptions import ContractError
from src.domain.run_models import ModelConfig
from src.infra.latgeo_core.attention import MultiHeadAttention
from src.infra.latgeo_core.encoder import FeedForward
from src.infra.numeric import ops
from src.infra.numeric.module import LayerNorm, Linear, Module
from src.infra.numeric.tensor import Tensor


class DecoderLayer(Module):
    """
    Masked self-attention, meshed cross-attention, feed-forward.

    The meshed sublayer cross-attends to each visible memory with one shared
    attention block and gates every branch with

        alpha_i = sigmoid([Y, C_i] W_i + b_i)

    per position and feature, summing alpha_i * C_i over branches.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, memory_indices: Sequence[int]):
        d = cfg.d_model
        self.self_attention = MultiHeadAttention(rng, d, cfg.heads)
        self.self_norm = LayerNorm(d, cfg.ln_eps)
        self.cross_attention = MultiHeadAttention(rng, d, cfg.heads)
        self.gates = [Linear(rng, 2 * d, d) for _ in memory_indices]
        self.cross_norm = LayerNorm(d, cfg.ln_eps)
        self.feed_forward = FeedForward(rng, d, cfg.ff_mult * d)
        self.ff_norm = LayerNorm(d, cfg.ln_eps)
        self.memory_indices = list(memory_indices)
        self.sqrt_norm = cfg.mesh_sqrt_norm
        self.rate = cfg.dropout
        self.record = False
        # (1-based encoder layer, per-head weights) for every mesh branch
        self.last_cross: list[tuple[int, list[np.ndarray]]] = []

    def __call__(
        self,
        y: Tensor,
        memories: Sequence[Tensor],
        mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        t = y.shape[0]
        if mask.shape != (t, t):
            raise ContractError(f"Decoder mask shape {mask.shape} does not match {t} positions")

        attended = self.self_attention(y, y, y, mask=mask)
        y = self.self_norm(y + ops.dropout(attended, self.rate, rng, self.training))

        mesh: Optional[Tensor] = None
        branches: list[tuple[int, list[np.ndarray]]] = []
        for gate, index in zip(self.gates, self.memory_indices):
            memory = memories[index]
            cross = self.cross_attention(y, memory, memory)
            if self.record:
                branches.append((index + 1, list(self.cross_attention.last_weights)))
            alpha = ops.sigmoid(gate(ops.concat_cols([y, cross])))
            branch = alpha * cross
            mesh = branch if mesh is None else mesh + branch
        if self.sqrt_norm:
            mesh = ops.scale(mesh, 1.0 / np.sqrt(len(self.gates)))
        if self.record:
            self.last_cross = branches
        y = self.cross_norm(y + ops.dropout(mesh, self.rate, rng, self.training))

        transformed = self.feed_forward(y, self.rate, rng)
        return self.ff_norm(y + ops.dropout(transformed, self.rate, rng, self.training))


class Decoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        cfg: ModelConfig,
        branches: Sequence[Sequence[int]],
        residual: bool = False,
    ):
        self.layers = [DecoderLayer(rng, cfg, indices) for indices in branches]
        self.residual = residual

    def __call__(
        self,
        y: Tensor,
        memories: Sequence[Tensor],
        mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        for index, layer in enumerate(self.layers):
            out = layer(y, memories, mask, rng)
            y = out + y if self.residual and index > 0 else out
        return y
