"""Multi-head attention with optional memory slots and geometric bias."""

import logging
from typing import Optional, Sequence

import numpy as np

from src.core.exceptions import DimensionError
from src.infra.numeric import ops
from src.infra.numeric.module import Linear, Module, xavier_uniform
from src.infra.numeric.tensor import Tensor

logger = logging.getLogger(__name__)


def causal_mask(t: int) -> np.ndarray:
    """mask[i, j] is True when query i may attend to key j (j <= i)."""
    return np.tril(np.ones((t, t), dtype=bool))


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention over h heads, concatenated through W_o.

    With memory_slots > 0 every head also attends to learned key/value rows
    M_k, M_v appended after the projected keys. With a geometric bias the
    weights for a query a are

        w[a, b] = g[a, b] * exp(s[a, b]) / sum_l g[a, l] * exp(s[a, l])

    where g is eta_g + eta_floor on real keys and 1 on memory slots. This is
    the only normalization applied; with eta_floor = 0 a unit bias is exactly plain attention.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        d_model: int,
        heads: int,
        memory_slots: int = 0,
        eta_floor: float = 1e-8,
    ):
        self.w_q = Linear(rng, d_model, d_model)
        self.w_k = Linear(rng, d_model, d_model)
        self.w_v = Linear(rng, d_model, d_model)
        self.w_o = Linear(rng, d_model, d_model)
        self.memory_k: Optional[Tensor] = None
        self.memory_v: Optional[Tensor] = None
        if memory_slots > 0:
            self.memory_k = Tensor(xavier_uniform(rng, memory_slots, d_model), requires_grad=True)
            self.memory_v = Tensor(xavier_uniform(rng, memory_slots, d_model), requires_grad=True)
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.memory_slots = memory_slots
        self.eta_floor = eta_floor
        self.record = False
        self.last_weights: list[np.ndarray] = []

    def __call__(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        mask: Optional[np.ndarray] = None,
        eta_g: Optional[Sequence[Tensor]] = None,
    ) -> Tensor:
        """
        Args:
            query: [t x d_model]
            key, value: [n x d_model]
            mask: optional boolean [t x n] over the real keys
            eta_g: optional per-head bias [t x n] over the real keys

        Returns:
            Tensor [t x d_model]
        """
        t, n, m = query.shape[0], key.shape[0], self.memory_slots
        if mask is not None and mask.shape != (t, n):
            raise DimensionError("attention mask", mask.shape, (t, n))
        if eta_g is not None and len(eta_g) != self.heads:
            raise DimensionError("geometry bias heads", (len(eta_g),), (self.heads,))

        q, k, v = self.w_q(query), self.w_k(key), self.w_v(value)
        full_mask = mask
        if mask is not None and m:
            full_mask = np.concatenate([mask, np.ones((t, m), dtype=bool)], axis=1)
        memory_bias = Tensor(np.ones((t, m))) if m else None

        outputs: list[Tensor] = []
        weights: list[np.ndarray] = []
        for j in range(self.heads):
            lo, hi = j * self.d_k, (j + 1) * self.d_k
            qh = ops.slice_cols(q, lo, hi)
            kh = ops.slice_cols(k, lo, hi)
            vh = ops.slice_cols(v, lo, hi)
            if m:
                kh = ops.concat_rows([kh, ops.slice_cols(self.memory_k, lo, hi)])
                vh = ops.concat_rows([vh, ops.slice_cols(self.memory_v, lo, hi)])

            scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), 1.0 / np.sqrt(self.d_k))
            bias = None
            if eta_g is not None:
                if eta_g[j].shape != (t, n):
                    raise DimensionError("geometry bias", eta_g[j].shape, (t, n))
                bias = ops.add(eta_g[j], self.eta_floor) if self.eta_floor else eta_g[j]
                if m:
                    bias = ops.concat_cols([bias, memory_bias])

            attn = ops.softmax_rows(scores, full_mask, bias)
            if self.record:
                weights.append(attn.data.copy())
            outputs.append(ops.matmul(attn, vh))

        if self.record:
            self.last_weights = weights
        return self.w_o(ops.concat_cols(outputs) if len(outputs) > 1 else outputs[0])
