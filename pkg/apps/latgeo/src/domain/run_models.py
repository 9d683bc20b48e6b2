from datetime import datetime
from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Connectivity(str, Enum):
    FULLY_CONNECTED = "fully_connected"
    SINGLE = "single"
    SKIPPED = "skipped"
    RESIDUAL_ENCODER = "residual_encoder"
    RESIDUAL_ENCDEC = "residual_encdec"


class GeometryKind(str, Enum):
    RATIO = "ratio"
    L1 = "l1"


class RolloutKind(str, Enum):
    BEAM = "beam"
    SAMPLE = "sample"


class ModelConfig(BaseModel):
    """Network shape and feature flags. Defaults are desk scale; see `full_scale()`."""
    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(default=64, ge=8, description="Token width")
    heads: int = Field(default=4, ge=1, description="Attention heads (h)")
    layers: int = Field(default=3, ge=1, description="Encoder and decoder depth (L)")
    memory_slots: int = Field(default=8, ge=0, description="Memory-augmented key/value slots (M)")
    d_feat: int = Field(default=64, ge=1, description="Proposal feature dimension")
    vocab_size: Optional[int] = Field(default=None, ge=5, description="Set from the vocabulary at build time")
    max_len: int = Field(default=22, ge=3, description="Caption length cap C, START and END included")

    connectivity: Connectivity = Field(default=Connectivity.FULLY_CONNECTED)
    skipped_layers: Optional[list[int]] = Field(
        default=None,
        description="1-based encoder layers visible to the decoder for 'skipped' (default: odd layers)"
    )
    use_geometry: bool = Field(default=True)
    geometry_kind: GeometryKind = Field(default=GeometryKind.RATIO)
    use_lam: bool = Field(default=True)
    use_background: bool = Field(default=True)

    h_geo: Optional[int] = Field(default=None, ge=1, description="Geometry projections: 1 (shared) or heads")
    geo_wave_len: float = Field(default=1000.0, gt=0, description="Sinusoid wavelength for relation embedding")
    geo_scale: float = Field(default=100.0, gt=0, description="Multiplier applied to xi before the sinusoid")
    eta_floor: float = Field(default=1e-8, ge=0, description="Added to the geometric bias on real keys")

    ff_mult: int = Field(default=4, ge=1, description="Feed-forward inner width as a multiple of d_model")
    dropout: float = Field(default=0.1, ge=0, lt=1)
    ln_eps: float = Field(default=1e-5, ge=0)
    mesh_sqrt_norm: bool = Field(default=True, description="Divide the mesh sum by sqrt(number of branches)")
    tie_embeddings: bool = Field(default=False, description="Reuse the word table as output projection")

    @model_validator(mode="after")
    def check_shapes(self) -> "ModelConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.d_model % 8 != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by 8 for the relation embedding")
        if self.h_geo is not None and self.h_geo not in (1, self.heads):
            raise ValueError(f"h_geo must be 1 or heads={self.heads}, got {self.h_geo}")
        return self

    @property
    def geo_heads(self) -> int:
        return self.h_geo if self.h_geo is not None else self.heads

    @classmethod
    def full_scale(cls, **overrides: Any) -> "ModelConfig":
        values = dict(d_model=512, heads=8, layers=3, memory_slots=40, d_feat=2048, max_len=22)
        values.update(overrides)
        return cls(**values)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    smoothing: float = Field(default=0.1, ge=0, lt=1, description="Label smoothing epsilon")
    warmup: int = Field(default=200, ge=1, description="Noam warmup steps (full scale: 10000)")
    lr_factor: float = Field(default=1.0, gt=0, description="Multiplier on the Noam schedule")
    rl_lr: float = Field(default=1e-4, gt=0, description="Fixed learning rate for SCST (full scale: 5e-6)")
    beam_size: int = Field(default=5, ge=1, description="Beam width for SCST rollouts and evaluation")
    val_beam_size: int = Field(default=1, ge=1, description="Beam width for validation decoding (1 = greedy)")
    patience: int = Field(default=5, ge=1, description="Epochs without val CIDEr-D improvement before stopping")
    batch_size: int = Field(default=4, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    rl_max_epochs: int = Field(default=50, ge=1)
    refs_per_scene: int = Field(default=5, ge=1, description="References per scene used by XE")
    val_fraction: float = Field(default=0.1, gt=0, lt=1, description="Held-out share when no --val file is given")
    min_count: int = Field(default=5, ge=0, description="Words need strictly more occurrences to get an id")
    max_grad_norm: Optional[float] = Field(default=None, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.98, ge=0, lt=1)
    adam_eps: float = Field(default=1e-9, ge=0)
    rl_rollout: RolloutKind = Field(default=RolloutKind.BEAM)
    temperature: float = Field(default=1.0, gt=0, description="Sampling temperature for rl_rollout=sample")
    length_alpha: Optional[float] = Field(default=None, ge=0, description="Wu length normalization exponent")
    cider_sigma: float = Field(default=6.0, gt=0)


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_scenes: int = Field(default=500, ge=0)
    seed: int = Field(default=0, ge=0)
    objects_min: int = Field(default=1, ge=1)
    objects_max: int = Field(default=4, ge=1)
    n_classes: int = Field(default=8, ge=1)
    d_feat: int = Field(default=64, ge=5, description="Last 4 entries hold the box encoding")
    image_w: int = Field(default=640, gt=0)
    image_h: int = Field(default=480, gt=0)
    captions_per_scene: int = Field(default=5, ge=1)
    prob_threshold: float = Field(default=0.7, ge=0, lt=1, description="Proposals need a strictly greater prob")
    max_objects: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def check_object_range(self) -> "SynthConfig":
        if self.objects_min > self.objects_max:
            raise ValueError(f"objects_min={self.objects_min} exceeds objects_max={self.objects_max}")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)


class RunManifest(BaseModel):
    """Everything needed to reproduce one command invocation."""
    command: str
    argv: list[str] = Field(default_factory=list)
    config: RunConfig
    seed: int
    started_at: datetime
    artifacts: dict[str, str] = Field(default_factory=dict, description="Artifact name -> path")

    @field_validator("artifacts", mode="before")
    @classmethod
    def stringify_paths(cls, v: Any) -> Any:
        if isinstance(v, dict):
            return {k: str(p) for k, p in v.items()}
        return v
