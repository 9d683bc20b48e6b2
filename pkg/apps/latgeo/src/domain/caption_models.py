from typing import Optional

from pydantic import BaseModel, Field


class CaptionHypothesis(BaseModel):
    """Beam-search unit: a token prefix starting with START."""
    tokens: list[int] = Field(..., min_length=1)
    logprob: float = Field(default=0.0, le=0.0, description="Sum of generated-token log-probabilities")
    finished: bool = Field(default=False, description="END has been emitted")

    @property
    def generated(self) -> list[int]:
        """Tokens after START, END excluded."""
        body = self.tokens[1:]
        return body[:-1] if self.finished else body

    def ranking_score(self, length_alpha: Optional[float] = None) -> float:
        """Log-prob, optionally divided by the Wu length penalty ((5 + |Y|) / 6)^alpha."""
        if length_alpha is None:
            return self.logprob
        return self.logprob / (((5.0 + len(self.tokens) - 1) / 6.0) ** length_alpha)


class CaptionRecord(BaseModel):
    """One line of a candidates JSONL file."""
    id: str
    caption: str


class Score(BaseModel):
    metric: str
    value: float = Field(..., description="Corpus score")
    per_image: dict[str, float] = Field(default_factory=dict)


class EvalReport(BaseModel):
    """Scores JSON written by `eval`; metrics that need external resources stay null."""
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rougeL: float
    ciderD: float
    meteor: Optional[float] = None
    spice: Optional[float] = None
    per_image: dict[str, dict[str, float]] = Field(default_factory=dict)


class EpochLog(BaseModel):
    """One row of the training CSV log."""
    epoch: int = Field(..., ge=1)
    split: str = "val"
    loss: float
    cider_d: float
    lr: float
    seconds: float


class TrainState(BaseModel):
    """Progress counters persisted with every checkpoint."""
    phase: str = Field(default="xe", pattern="^(xe|rl)$")
    epoch: int = Field(default=0, ge=0, description="Completed epochs in the current phase")
    step: int = Field(default=0, ge=0, description="Completed optimizer steps in the current phase")
    best_cider_d: Optional[float] = Field(default=None, description="None until the first validation")
    best_epoch: int = Field(default=0, ge=0)
    epochs_without_improvement: int = Field(default=0, ge=0)


class AblationRow(BaseModel):
    name: str
    overrides: dict[str, object] = Field(default_factory=dict)
    parameters: Optional[int] = None
    epochs: Optional[int] = None
    bleu1: Optional[float] = None
    bleu2: Optional[float] = None
    bleu3: Optional[float] = None
    bleu4: Optional[float] = None
    rougeL: Optional[float] = None
    ciderD: Optional[float] = None
    error: Optional[str] = None
