import logging
from collections import Counter
from typing import Iterable, Sequence

from src.core.exceptions import VocabularyError
from src.domain.scene_models import RESERVED_WORDS, Scene, Vocabulary

logger = logging.getLogger(__name__)


def tokenize(caption: str) -> list[str]:
    """Captions are lower-case with single-space separators."""
    return [w for w in caption.split(" ") if w]


def build_vocab(captions: Iterable[str], min_count: int = 5) -> Vocabulary:
    """
    Words seen more than `min_count` times get ids after the reserved ones,
    in order of first appearance.

    Raises:
        VocabularyError: If the corpus is empty
    """
    counts: Counter[str] = Counter()
    order: list[str] = []
    for caption in captions:
        for word in tokenize(caption):
            if word not in counts:
                order.append(word)
            counts[word] += 1
    if not counts:
        raise VocabularyError("Cannot build a vocabulary from an empty corpus")

    kept = [w for w in order if counts[w] > min_count and w not in RESERVED_WORDS]
    vocab = Vocabulary(words=[*RESERVED_WORDS, *kept], counts=dict(counts), min_count=min_count)
    logger.info(f"Vocabulary: {len(kept)} of {len(counts)} words above min_count={min_count}")
    return vocab


def vocab_from_scenes(scenes: Sequence[Scene], min_count: int = 5) -> Vocabulary:
    return build_vocab((ref for scene in scenes for ref in scene.refs), min_count)


def encode_references(scene: Scene, vocab: Vocabulary, max_len: int, limit: int | None = None) -> list[list[int]]:
    """START ... END token ids for each reference, truncated to fit max_len."""
    encoded = []
    for ref in scene.refs[:limit]:
        ids = vocab.encode(ref)
        if len(ids) > max_len:
            logger.warning(f"Scene {scene.id}: reference truncated to {max_len} tokens")
            ids = ids[: max_len - 1] + [ids[-1]]
        encoded.append(ids)
    return encoded
