"""Which encoder memories each decoder layer cross-attends to."""

from pydantic import BaseModel, Field

from src.core.exceptions import ConfigError
from src.domain.run_models import Connectivity, ModelConfig


class ConnectivityPlan(BaseModel):
    branches: list[list[int]] = Field(..., description="0-based memory indices per decoder layer")
    residual_encoder: bool = False
    residual_decoder: bool = False

    @property
    def branch_count(self) -> int:
        return sum(len(b) for b in self.branches)


def build_connectivity(cfg: ModelConfig) -> ConnectivityPlan:
    """
    Wiring plan for cfg.connectivity.

    fully_connected and both residual variants: every decoder layer sees all L memories.
    single: decoder layer n sees memory n. skipped: every decoder layer sees
    cfg.skipped_layers (1-based; default the odd layers 1, 3, ...).

    Raises:
        ConfigError: If the skipped subset is empty or out of range
    """
    depth = cfg.layers
    every = list(range(depth))

    if cfg.connectivity == Connectivity.SINGLE:
        return ConnectivityPlan(branches=[[n] for n in every])

    if cfg.connectivity == Connectivity.SKIPPED:
        chosen = cfg.skipped_layers if cfg.skipped_layers is not None else list(range(1, depth + 1, 2))
        if not chosen:
            raise ConfigError("skipped connectivity needs at least one encoder layer")
        bad = [n for n in chosen if not 1 <= n <= depth]
        if bad:
            raise ConfigError(f"skipped_layers {bad} outside 1..{depth}")
        subset = sorted({n - 1 for n in chosen})
        return ConnectivityPlan(branches=[list(subset) for _ in every])

    return ConnectivityPlan(
        branches=[list(every) for _ in every],
        residual_encoder=cfg.connectivity in (Connectivity.RESIDUAL_ENCODER, Connectivity.RESIDUAL_ENCDEC),
        residual_decoder=cfg.connectivity == Connectivity.RESIDUAL_ENCDEC,
    )
