"""Exception hierarchy shared by every layer; exit codes are read by src.main."""

from typing import Optional, Sequence


class LatgeoError(Exception):
    """Base class for all expected failures."""
    exit_code: int = 1


# --- Input errors (exit 1) ---

class InputError(LatgeoError):
    exit_code = 1


class ConfigError(InputError):
    """Invalid configuration value or combination."""


class SceneParseError(InputError):
    """Malformed line in a scene JSONL file."""

    def __init__(self, path: str, line_number: int, detail: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {detail}")


class EmptySceneError(InputError):
    """A scene lost every proposal to the detection filters."""

    def __init__(self, scene_id: str):
        self.scene_id = scene_id
        super().__init__(f"Scene '{scene_id}' has no proposals above the detection threshold")


class VocabularyError(InputError):
    """Vocabulary cannot be built or applied."""


# --- Numeric errors (exit 2) ---

class NumericError(LatgeoError):
    exit_code = 2


class DimensionError(NumericError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class DegenerateMaskError(NumericError):
    """A softmax row has no unmasked entry."""


class ContractError(NumericError):
    """An operation was called outside its preconditions."""


class EmptyBatchError(ContractError):
    """Every target position is masked out."""


class TrainingDivergenceError(NumericError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, detail: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(detail if parameter is None else f"{detail} (parameter '{parameter}')")


class GradientCheckError(NumericError):
    """Reverse-mode gradient disagrees with finite differences."""


class EmbeddingIndexError(IndexError):
    """Embedding lookup id outside the table."""

    def __init__(self, token_id: int, table_size: int):
        self.token_id = token_id
        super().__init__(f"Embedding id {token_id} outside table of {table_size} rows")


# --- Storage errors (exit 3) ---

class StorageError(LatgeoError):
    exit_code = 3


class CheckpointError(StorageError):
    """Checkpoint file cannot be written, read, or applied."""

    def __init__(self, detail: str, offending: Optional[Sequence[str]] = None):
        self.offending = list(offending or [])
        if self.offending:
            detail = f"{detail}: {', '.join(self.offending)}"
        super().__init__(detail)
