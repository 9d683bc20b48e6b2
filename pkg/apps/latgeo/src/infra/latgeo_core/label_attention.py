"""
Label-attention gate.

Detected class words are embedded with the caption word table, scaled by
their detection probability, attended over with a dedicated multi-head block
and squashed to a (0, 1) gate that multiplies every encoder layer's output.
"""

from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.core.exceptions import ConfigError, DimensionError
from src.domain.scene_models import Vocabulary
from src.infra.latgeo_core.attention import MultiHeadAttention
from src.infra.numeric import ops
from src.infra.numeric.module import Module
from src.infra.numeric.tensor import Tensor


class LabelSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    l_o: Tensor
    r_o: Tensor
    probs: np.ndarray


def labels_embed(class_words: Sequence[str], vocab: Vocabulary, table: Tensor) -> Tensor:
    """Rows of `table` at each class word's id; unknown words take the UNK row."""
    return ops.embed_lookup(table, [vocab.id_of(w) for w in class_words])


def rank_labels(l_o: Tensor, probs: Sequence[float]) -> Tensor:
    """R_O[i] = probs[i] * L_O[i]."""
    return ops.scale_rows(l_o, np.asarray(probs, dtype=np.float64))


class LabelAttention(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, heads: int):
        self.attention = MultiHeadAttention(rng, d_model, heads)

    def __call__(self, labels: LabelSet, with_background: bool) -> Tensor:
        """
        L_Att = sigmoid(MultiHead(Q=L_O, K=R_O, V=L_O)); a ones row is appended for
        the background token when present.
        """
        gate = ops.sigmoid(self.attention(labels.l_o, labels.r_o, labels.l_o))
        if with_background:
            gate = ops.concat_rows([gate, Tensor(np.ones((1, gate.shape[1])))])
        return gate


def gate_encoder_outputs(encoder_outputs: Sequence[Tensor], gate: Tensor, layers: int) -> list[Tensor]:
    """
    memory_n = E_Out(n) * L_Att elementwise, for every encoder layer n.

    Raises:
        ConfigError: If the number of outputs is not `layers`
        DimensionError: If an output and the gate disagree in shape
    """
    if len(encoder_outputs) != layers:
        raise ConfigError(f"Expected {layers} encoder outputs to gate, got {len(encoder_outputs)}")
    gated = []
    for out in encoder_outputs:
        if out.shape != gate.shape:
            raise DimensionError("gate_encoder_outputs", out.shape, gate.shape)
        gated.append(out * gate)
    return gated
