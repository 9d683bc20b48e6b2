from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED_WORDS = ("<pad>", "<start>", "<end>", "<unk>")


class Box(BaseModel):
    """Axis-aligned box given by its center and size, in pixels."""
    x: float = Field(..., ge=0, description="Center x")
    y: float = Field(..., ge=0, description="Center y")
    w: float = Field(..., gt=0)
    h: float = Field(..., gt=0)

    def scaled(self, s: float) -> "Box":
        return Box(x=self.x * s, y=self.y * s, w=self.w * s, h=self.h * s)

    @property
    def area(self) -> float:
        return self.w * self.h


class Proposal(BaseModel):
    box: Box
    class_word: str = Field(..., min_length=1, description="Detected class label as a caption word")
    class_id: Optional[int] = Field(default=None, ge=0, description="Synthetic class index, when known")
    class_prob: float = Field(..., gt=0, le=1)
    feature: list[float] = Field(..., min_length=1)

    @field_validator("feature")
    @classmethod
    def finite_feature(cls, v: list[float]) -> list[float]:
        if not np.all(np.isfinite(v)):
            raise ValueError("feature contains non-finite values")
        return v


class Scene(BaseModel):
    """One image worth of encoder inputs plus its reference captions."""
    id: str = Field(..., min_length=1)
    image_w: float = Field(..., gt=0)
    image_h: float = Field(..., gt=0)
    proposals: list[Proposal] = Field(..., min_length=1)
    background: list[float] = Field(..., min_length=1, description="Whole-image feature vector")
    refs: list[str] = Field(default_factory=list, description="Lower-case, space-separated reference captions")

    @model_validator(mode="after")
    def check_boxes(self) -> "Scene":
        dims = {len(self.background)} | {len(p.feature) for p in self.proposals}
        if len(dims) != 1:
            raise ValueError(f"feature dimensions disagree: {sorted(dims)}")
        for p in self.proposals:
            if p.box.x > self.image_w or p.box.y > self.image_h:
                raise ValueError(f"box center ({p.box.x}, {p.box.y}) outside {self.image_w}x{self.image_h} image")
        return self

    @property
    def d_feat(self) -> int:
        return len(self.background)

    def features(self) -> np.ndarray:
        return np.array([p.feature for p in self.proposals], dtype=np.float64)

    def permuted(self, order: list[int]) -> "Scene":
        return self.model_copy(update={"proposals": [self.proposals[i] for i in order]})


class Vocabulary(BaseModel):
    """
    Word <-> id map. Ids 0..3 are PAD, START, END, UNK; corpus words follow in
    first-appearance order.
    """
    words: list[str] = Field(default_factory=lambda: list(RESERVED_WORDS))
    counts: dict[str, int] = Field(default_factory=dict, description="Corpus frequency of every seen word")
    min_count: int = Field(default=5, ge=0)

    _index: dict[str, int] = PrivateAttr(default_factory=dict)

    @field_validator("words")
    @classmethod
    def check_words(cls, v: list[str]) -> list[str]:
        if tuple(v[:4]) != RESERVED_WORDS:
            raise ValueError(f"vocabulary must start with {RESERVED_WORDS}")
        if len(set(v)) != len(v):
            raise ValueError("vocabulary words must be unique")
        return v

    def model_post_init(self, __context) -> None:
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index and self._index[word] > UNK

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK)

    def word_of(self, token_id: int) -> str:
        return self.words[token_id]

    def encode(self, caption: str, bounds: bool = True) -> list[int]:
        ids = [self.id_of(w) for w in caption.split(" ") if w]
        return [START, *ids, END] if bounds else ids

    def decode(self, ids: list[int]) -> str:
        """Words of ids with PAD, START and END dropped."""
        return " ".join(self.words[i] for i in ids if i not in (PAD, START, END))


class ProposalRecord(BaseModel):
    """Proposal as it appears in a scene JSONL line."""
    model_config = ConfigDict(populate_by_name=True)

    x: float
    y: float
    w: float
    h: float
    class_word: str = Field(..., alias="class")
    prob: float
    feature: list[float]


class SceneRecord(BaseModel):
    """One scene JSONL line before detection filtering."""
    id: str
    image_w: float
    image_h: float
    background: list[float]
    proposals: list[ProposalRecord] = Field(default_factory=list)
    refs: list[str] = Field(default_factory=list)

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneRecord":
        return cls(
            id=scene.id,
            image_w=scene.image_w,
            image_h=scene.image_h,
            background=scene.background,
            proposals=[
                ProposalRecord(
                    x=p.box.x, y=p.box.y, w=p.box.w, h=p.box.h,
                    class_word=p.class_word, prob=p.class_prob, feature=p.feature,
                )
                for p in scene.proposals
            ],
            refs=scene.refs,
        )
