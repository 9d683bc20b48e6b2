"""Greedy, beam and sampled caption generation."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional, Protocol, Sequence

import numpy as np
from tqdm import tqdm

from src.core.config import get_settings
from src.core.exceptions import ContractError
from src.domain.caption_models import CaptionHypothesis
from src.domain.scene_models import END, PAD, START, UNK, Scene, Vocabulary
from src.infra.numeric.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

BLOCKED_TOKENS = (PAD, START, UNK)


class CaptionModel(Protocol):
    """
    Anything that can be decoded.
    Structural typing via Protocol: LatgeoModel, or a hand-built toy with fixed transitions.
    """
    max_len: int
    vocab_size: int

    def encode(self, scene: Scene) -> Any:
        ...

    def decode(self, encoded: Any, prefix: list[int]) -> Tensor:
        ...


def allowed_tokens(vocab_size: int) -> np.ndarray:
    mask = np.ones(vocab_size, dtype=bool)
    mask[list(BLOCKED_TOKENS)] = False
    return mask


def next_log_probs(model: CaptionModel, encoded: Any, prefix: list[int]) -> np.ndarray:
    """Log-distribution of the next token with PAD/START/UNK removed and the rest renormalized."""
    logits = model.decode(encoded, prefix).data[-1]
    allowed = allowed_tokens(logits.shape[0])
    shifted = np.where(allowed, logits, -np.inf)
    shifted = shifted - shifted[allowed].max()
    return shifted - np.log(np.exp(shifted[allowed]).sum())


def _is_terminal(hyp: CaptionHypothesis, max_len: int) -> bool:
    return hyp.finished or len(hyp.tokens) >= max_len


def greedy(model: CaptionModel, scene: Scene, max_len: Optional[int] = None) -> CaptionHypothesis:
    """Argmax token per step (smallest id on ties) until END or max_len tokens including START."""
    max_len = max_len or model.max_len
    with no_grad():
        encoded = model.encode(scene)
        tokens, logprob = [START], 0.0
        while len(tokens) < max_len:
            lp = next_log_probs(model, encoded, tokens)
            token = int(np.argmax(lp))
            logprob += float(lp[token])
            tokens.append(token)
            if token == END:
                return CaptionHypothesis(tokens=tokens, logprob=logprob, finished=True)
    return CaptionHypothesis(tokens=tokens, logprob=logprob, finished=False)


def _rank_key(hyp: CaptionHypothesis, length_alpha: Optional[float]) -> tuple[float, list[int]]:
    return -hyp.ranking_score(length_alpha), hyp.tokens


def beam_search(
    model: CaptionModel,
    scene: Scene,
    k: int,
    max_len: Optional[int] = None,
    length_alpha: Optional[float] = None,
) -> list[CaptionHypothesis]:
    """
    Beam search keeping the best k of finished and expanded hypotheses each step.

    Finished and length-capped hypotheses stay in the pool and compete with
    live ones. Order is by cumulative log-prob (or its Wu-normalized form when
    length_alpha is set), then by token ids.

    Returns:
        Up to k hypotheses, best first
    """
    if k < 1:
        raise ContractError(f"Beam size must be at least 1, got {k}")
    max_len = max_len or model.max_len
    with no_grad():
        encoded = model.encode(scene)
        beams = [CaptionHypothesis(tokens=[START])]
        while not all(_is_terminal(h, max_len) for h in beams):
            pool: list[CaptionHypothesis] = []
            for hyp in beams:
                if _is_terminal(hyp, max_len):
                    pool.append(hyp)
                    continue
                lp = next_log_probs(model, encoded, hyp.tokens)
                ids = np.flatnonzero(np.isfinite(lp))
                # At most k children of one parent can survive; order by (-lp, id)
                best = ids[np.lexsort((ids, -lp[ids]))][:k]
                for token in best:
                    token = int(token)
                    pool.append(CaptionHypothesis(
                        tokens=hyp.tokens + [token],
                        logprob=hyp.logprob + float(lp[token]),
                        finished=token == END,
                    ))
            pool.sort(key=lambda h: _rank_key(h, length_alpha))
            beams = pool[:k]
    return beams


def sample(
    model: CaptionModel,
    scene: Scene,
    k: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    max_len: Optional[int] = None,
) -> list[CaptionHypothesis]:
    """k independent rollouts from the temperature-scaled next-token distribution."""
    max_len = max_len or model.max_len
    rollouts = []
    with no_grad():
        encoded = model.encode(scene)
        for _ in range(k):
            tokens, logprob, finished = [START], 0.0, False
            while len(tokens) < max_len and not finished:
                lp = next_log_probs(model, encoded, tokens)
                scaled = np.where(np.isfinite(lp), lp / temperature, -np.inf)
                probs = np.exp(scaled - scaled.max())
                probs /= probs.sum()
                token = int(rng.choice(len(probs), p=probs))
                logprob += float(lp[token])
                tokens.append(token)
                finished = token == END
            rollouts.append(CaptionHypothesis(tokens=tokens, logprob=logprob, finished=finished))
    return rollouts


def caption_scene(
    model: CaptionModel,
    scene: Scene,
    beam_size: int = 1,
    length_alpha: Optional[float] = None,
) -> CaptionHypothesis:
    if beam_size == 1:
        return greedy(model, scene)
    return beam_search(model, scene, beam_size, length_alpha=length_alpha)[0]


def caption_scenes(
    model: CaptionModel,
    scenes: Sequence[Scene],
    vocab: Vocabulary,
    beam_size: int = 1,
    length_alpha: Optional[float] = None,
    progress: bool = False,
) -> dict[str, str]:
    """
    Caption every scene on a frozen model; worker count is capped by LATGEO_THREADS.

    Returns:
        Scene id -> caption text
    """
    workers = get_settings().threads

    def run(scene: Scene) -> tuple[str, str]:
        hyp = caption_scene(model, scene, beam_size, length_alpha)
        return scene.id, vocab.decode(hyp.tokens)

    if workers > 1 and len(scenes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(run, scenes), total=len(scenes), desc="decode", disable=not progress))
    else:
        results = [run(s) for s in tqdm(scenes, desc="decode", disable=not progress)]
    return dict(results)
