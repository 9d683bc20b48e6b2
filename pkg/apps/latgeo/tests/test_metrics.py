import math

import pytest

from src.core.exceptions import ContractError, InputError
from src.services.metrics_service import CiderD, bleu, bleu_scores, cider_d, lcs_length, rouge_l, score_all

CANDIDATES = {
    "img1": "a cat left of a dog",
    "img2": "a big car",
    "img3": "there is a small dog",
}
REFERENCES = {
    "img1": ["a cat left of a dog", "a dog right of a cat"],
    "img2": ["a big car", "there is a big car near a cat"],
    "img3": ["a small dog", "there is a small dog"],
}


def test_bleu_perfect_match():
    scores = bleu_scores({"x": "a b c d e"}, {"x": ["a b c d e"]})
    assert [s.value for s in scores] == pytest.approx([1.0, 1.0, 1.0, 1.0])


def test_bleu1_brevity_penalty():
    score = bleu({"x": "a b c"}, {"x": ["a b c d"]}, n=1)
    assert score.value == pytest.approx(math.exp(1 - 4 / 3))
    assert score.value == pytest.approx(0.7165, abs=1e-4)
    assert score.per_image["x"] == pytest.approx(score.value)


def test_bleu_closest_reference_length():
    score = bleu({"x": "a b c"}, {"x": ["a b", "a b c d e"]}, n=1)
    assert score.value == pytest.approx(1.0)


def test_bleu_clips_repeated_words():
    assert bleu({"x": "a a a a"}, {"x": ["a b c d"]}, n=1).value == pytest.approx(0.25)


def test_bleu_without_overlap_or_candidate_is_zero():
    assert bleu({"x": "x y z"}, {"x": ["a b c"]}, n=1).value == 0.0
    assert bleu({"x": ""}, {"x": ["a b c"]}, n=1).per_image["x"] == 0.0


def test_rouge_l_examples():
    assert rouge_l({"x": "a b c"}, {"x": ["a b c"]}).value == pytest.approx(1.0)
    assert rouge_l({"x": "a b c"}, {"x": ["d e"]}).value == 0.0
    beta2 = 1.2 ** 2
    expected = (1 + beta2) * (2 / 3) * 1.0 / (1.0 + beta2 * (2 / 3))
    score = rouge_l({"x": "a x b"}, {"x": ["a b"]})
    assert score.value == pytest.approx(expected)
    assert score.value == pytest.approx(0.82993, abs=1e-5)


def test_rouge_l_takes_best_reference():
    score = rouge_l({"x": "a b c"}, {"x": ["d e f", "a b c"]})
    assert score.value == pytest.approx(1.0)


def test_lcs_length():
    assert lcs_length("a b c d".split(), "a c d".split()) == 3
    assert lcs_length([], ["a"]) == 0


def test_cider_d_two_perfect_images_score_ten():
    candidates = {"one": "a b c d", "two": "e f g h"}
    references = {"one": ["a b c d"], "two": ["e f g h"]}
    score = cider_d(candidates, references)
    assert score.per_image == pytest.approx({"one": 10.0, "two": 10.0})
    assert score.value == pytest.approx(10.0)


def test_cider_d_without_shared_ngrams_is_zero():
    score = cider_d({"one": "x y z", "two": "e f g h"}, {"one": ["a b c d"], "two": ["e f g h"]})
    assert score.per_image["one"] == 0.0


def test_cider_d_needs_two_images():
    with pytest.raises(ContractError):
        CiderD({"one": ["a b"]})


def test_cider_d_per_image_mean_is_corpus_value():
    score = cider_d(CANDIDATES, REFERENCES)
    assert score.value == pytest.approx(sum(score.per_image.values()) / len(score.per_image))


def test_scores_stay_in_range():
    scores = score_all(CANDIDATES, REFERENCES)
    for name, score in scores.items():
        upper = 10.0 if name == "ciderD" else 1.0
        assert 0.0 <= score.value <= upper
        assert all(0.0 <= v <= upper for v in score.per_image.values())


def test_scores_do_not_depend_on_image_order():
    reordered_c = dict(reversed(list(CANDIDATES.items())))
    reordered_r = dict(reversed(list(REFERENCES.items())))
    first, second = score_all(CANDIDATES, REFERENCES), score_all(reordered_c, reordered_r)
    assert {k: s.value for k, s in first.items()} == {k: s.value for k, s in second.items()}


def test_duplicating_the_corpus_leaves_scores_unchanged():
    doubled_c = {**CANDIDATES, **{f"{k}-copy": v for k, v in CANDIDATES.items()}}
    doubled_r = {**REFERENCES, **{f"{k}-copy": v for k, v in REFERENCES.items()}}
    single, doubled = score_all(CANDIDATES, REFERENCES), score_all(doubled_c, doubled_r)
    for name in single:
        assert doubled[name].value == pytest.approx(single[name].value, abs=1e-12)
    for image_id, value in single["ciderD"].per_image.items():
        assert doubled["ciderD"].per_image[image_id] == pytest.approx(value, abs=1e-12)


def test_self_reference_gives_perfect_bleu1_and_rouge():
    candidates = {"a": "the cat is left of the dog", "b": "a van"}
    references = {k: [v] for k, v in candidates.items()}
    assert bleu(candidates, references, n=1).value == pytest.approx(1.0)
    assert rouge_l(candidates, references).value == pytest.approx(1.0)


def test_reward_scorer_keeps_frozen_document_frequencies():
    scorer = CiderD(REFERENCES)
    before = scorer.score_one("a big car", REFERENCES["img2"])
    scorer.score({"img1": "a dog", "img2": "a car", "img3": "a cat"}, REFERENCES)
    assert scorer.score_one("a big car", REFERENCES["img2"]) == before


def test_mismatched_ids_are_input_errors():
    with pytest.raises(InputError):
        rouge_l({"x": "a"}, {"y": ["a"]})
