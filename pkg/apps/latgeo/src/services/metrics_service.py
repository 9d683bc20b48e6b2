"""
Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

Inputs are keyed by image id: `candidates[id]` is one caption string and
`references[id]` a list of caption strings, all lower-case and space-separated
without START/END.
"""

import logging
import math
from collections import Counter
from typing import Mapping, Optional, Sequence

import numpy as np

from src.core.exceptions import ContractError, InputError
from src.domain.caption_models import Score
from src.services.vocab_service import tokenize

logger = logging.getLogger(__name__)

Candidates = Mapping[str, str]
References = Mapping[str, Sequence[str]]

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
MAX_N = 4


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_keys(candidates: Candidates, references: References) -> list[str]:
    if set(candidates) != set(references):
        missing = sorted(set(references) - set(candidates))
        extra = sorted(set(candidates) - set(references))
        raise InputError(f"Candidate ids do not match reference ids (missing {missing[:5]}, extra {extra[:5]})")
    return sorted(candidates)


# --- BLEU ---

def _bleu_stats(candidate: list[str], refs: list[list[str]], max_n: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        clip: Counter = Counter()
        for ref in refs:
            clip |= ngrams(ref, n)
        matches[n - 1] = sum(min(count, clip[g]) for g, count in cand.items())
        totals[n - 1] = max(len(candidate) - n + 1, 0)
    c = len(candidate)
    # Closest reference length, shorter wins ties
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1] if refs else 0
    return matches, totals, c, r


def _bleu_from_stats(matches: np.ndarray, totals: np.ndarray, c: int, r: int, n: int) -> float:
    if c == 0 or np.any(totals[:n] == 0) or np.any(matches[:n] == 0):
        return 0.0
    log_precision = float(np.mean(np.log(matches[:n] / totals[:n])))
    brevity = math.exp(min(0.0, 1.0 - r / c))
    return brevity * math.exp(log_precision)


def bleu_scores(candidates: Candidates, references: References, max_n: int = MAX_N) -> list[Score]:
    """
    BLEU-1..max_n from corpus-level clipped counts with the closest-reference
    brevity penalty, no smoothing. Per-image values use the same formula on one image.
    """
    ids = _check_keys(candidates, references)
    matches, totals = np.zeros(max_n), np.zeros(max_n)
    c_total = r_total = 0
    per_image: list[dict[str, float]] = [dict() for _ in range(max_n)]

    for image_id in ids:
        refs = [tokenize(r) for r in references[image_id]]
        m, t, c, r = _bleu_stats(tokenize(candidates[image_id]), refs, max_n)
        matches += m
        totals += t
        c_total += c
        r_total += r
        for n in range(1, max_n + 1):
            per_image[n - 1][image_id] = _bleu_from_stats(m, t, c, r, n)

    return [
        Score(
            metric=f"bleu{n}",
            value=_bleu_from_stats(matches, totals, c_total, r_total, n),
            per_image=per_image[n - 1],
        )
        for n in range(1, max_n + 1)
    ]


def bleu(candidates: Candidates, references: References, n: int = 4) -> Score:
    return bleu_scores(candidates, references, n)[n - 1]


# --- ROUGE-L ---

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    row = [0] * (len(b) + 1)
    for x in a:
        prev_diag = 0
        for j, y in enumerate(b, start=1):
            prev_row = row[j]
            row[j] = prev_diag + 1 if x == y else max(row[j], row[j - 1])
            prev_diag = prev_row
    return row[-1]


def rouge_l_single(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)


def rouge_l(candidates: Candidates, references: References, beta: float = ROUGE_BETA) -> Score:
    """Per image: max over references of the LCS F-measure; corpus: mean over images."""
    ids = _check_keys(candidates, references)
    per_image = {
        image_id: max(
            (rouge_l_single(tokenize(candidates[image_id]), tokenize(ref), beta) for ref in references[image_id]),
            default=0.0,
        )
        for image_id in ids
    }
    value = float(np.mean(list(per_image.values()))) if per_image else 0.0
    return Score(metric="rougeL", value=value, per_image=per_image)


# --- CIDEr-D ---

class CiderD:
    """
    CIDEr-D with document frequencies frozen from a reference corpus.

    The same instance scores evaluation corpora and, during self-critical
    training, single candidates as the reward.
    """

    def __init__(self, references: References, sigma: float = CIDER_SIGMA, max_n: int = MAX_N):
        if len(references) < 2:
            raise ContractError(f"CIDEr-D needs a corpus of at least 2 images, got {len(references)}")
        self.sigma = sigma
        self.max_n = max_n
        self.corpus_size = len(references)
        self.df: Counter = Counter()
        for refs in references.values():
            seen = set()
            for ref in refs:
                tokens = tokenize(ref)
                for n in range(1, max_n + 1):
                    seen.update(ngrams(tokens, n))
            self.df.update(seen)
        self._log_corpus = math.log(float(self.corpus_size))

    def _vectors(self, tokens: list[str]) -> tuple[list[dict], list[float]]:
        vecs, norms = [], []
        for n in range(1, self.max_n + 1):
            vec = {
                g: tf * (self._log_corpus - math.log(max(1.0, self.df[g])))
                for g, tf in ngrams(tokens, n).items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    def _similarity(self, cand: tuple, ref: tuple, len_c: int, len_r: int) -> np.ndarray:
        (vc, nc), (vr, nr) = cand, ref
        penalty = math.exp(-((len_c - len_r) ** 2) / (2.0 * self.sigma ** 2))
        sims = np.zeros(self.max_n)
        for n in range(self.max_n):
            if nc[n] == 0 or nr[n] == 0:
                continue
            dot = sum(min(value, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, value in vc[n].items())
            sims[n] = dot / (nc[n] * nr[n]) * penalty
        return sims

    def score_one(self, candidate: str, refs: Sequence[str]) -> float:
        """CIDEr-D of one candidate against its references, in [0, 10]."""
        if not refs:
            return 0.0
        cand_tokens = tokenize(candidate)
        cand = self._vectors(cand_tokens)
        total = np.zeros(self.max_n)
        for ref in refs:
            ref_tokens = tokenize(ref)
            total += self._similarity(cand, self._vectors(ref_tokens), len(cand_tokens), len(ref_tokens))
        return float(np.mean(total) / len(refs) * 10.0)

    def score(self, candidates: Candidates, references: References) -> Score:
        ids = _check_keys(candidates, references)
        per_image = {image_id: self.score_one(candidates[image_id], references[image_id]) for image_id in ids}
        value = float(np.mean(list(per_image.values()))) if per_image else 0.0
        return Score(metric="ciderD", value=value, per_image=per_image)


def cider_d(candidates: Candidates, references: References, sigma: float = CIDER_SIGMA) -> Score:
    """CIDEr-D with document frequencies taken from `references` themselves."""
    return CiderD(references, sigma).score(candidates, references)


def score_all(candidates: Candidates, references: References, scorer: Optional[CiderD] = None) -> dict[str, Score]:
    """Every supported metric keyed by report name (bleu1..bleu4, rougeL, ciderD)."""
    scores = {s.metric: s for s in bleu_scores(candidates, references)}
    scores["rougeL"] = rouge_l(candidates, references)
    scorer = scorer or CiderD(references)
    scores["ciderD"] = scorer.score(candidates, references)
    return scores
