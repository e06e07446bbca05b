"""
Gradus QR v1.0 - Text Metric Tests
Tokenization, BLEU and ROUGE against hand counts and a brute-force reference
"""

import math
from functools import lru_cache

import numpy as np
import pytest

from src.core.exceptions import ConfigError, EmptyText, InvalidOrder
from src.core.textmetrics import (
    BleuConfig,
    corpus_rouge,
    lcs_length,
    ngram_counts,
    rouge_l,
    rouge_n,
    sentence_bleu,
    tokenize,
)

HYP = ["did", "he", "win", "any", "awards"]
REF = ["did", "robert", "fripp", "win", "any", "awards"]
WORDS = ["a", "b", "c", "d", "e", "the", "of"]


def brute_ngrams(seq, n):
    grams = []
    for i in range(len(seq) - n + 1):
        grams.append(tuple(seq[i:i + n]))
    return grams


def brute_clipped(hyp, ref, n):
    hyp_grams, ref_grams = brute_ngrams(hyp, n), brute_ngrams(ref, n)
    matches = 0
    for gram in set(hyp_grams):
        matches += min(hyp_grams.count(gram), ref_grams.count(gram))
    return matches, len(hyp_grams)


def brute_bleu(hyp, ref, max_n=4):
    if hyp == ref:
        return 1.0
    logs, zeros = 0.0, 0
    for n in range(1, max_n + 1):
        matches, total = brute_clipped(hyp, ref, n)
        total = max(total, 1)
        if matches:
            logs += math.log(matches / total)
        else:
            zeros += 1
            logs += math.log(1.0 / (2 ** zeros * total))
    bp = min(1.0, math.exp(1 - len(ref) / len(hyp)))
    return bp * math.exp(logs / max_n)


def brute_lcs(a, b):
    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))
    return rec(0, 0)


def random_pairs(count=20, seed=17):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        hyp = [WORDS[i] for i in rng.integers(0, len(WORDS), size=int(rng.integers(1, 9)))]
        ref = [WORDS[i] for i in rng.integers(0, len(WORDS), size=int(rng.integers(1, 9)))]
        pairs.append((hyp, ref))
    return pairs


class TestTokenize:
    def test_lowercases_and_splits(self):
        assert tokenize("Did he win any awards ?") == ["did", "he", "win", "any", "awards", "?"]

    def test_detaches_punctuation(self):
        assert tokenize("Why?") == ["why", "?"]

    def test_blank_text_rejected(self):
        with pytest.raises(EmptyText):
            tokenize("  ")


class TestNgramCounts:
    def test_unigrams(self):
        assert ngram_counts(["a", "b", "a"], 1) == {("a",): 2, ("b",): 1}

    def test_bigrams(self):
        assert ngram_counts(["a", "b", "a"], 2) == {("a", "b"): 1, ("b", "a"): 1}

    def test_order_longer_than_sequence(self):
        assert ngram_counts(["a", "b"], 3) == {}

    def test_invalid_order(self):
        with pytest.raises(InvalidOrder):
            ngram_counts(["a"], 0)


class TestSentenceBleu:
    def test_identity(self):
        assert sentence_bleu(REF, REF).value == 1.0

    def test_identity_shorter_than_max_order(self):
        assert sentence_bleu(["why", "?"], ["why", "?"]).value == 1.0

    def test_hand_counted_example(self):
        score = sentence_bleu(HYP, REF)
        assert score.precisions == pytest.approx((4 / 5, 2 / 4, 1 / 3, 1 / 4))
        assert score.brevity_penalty == pytest.approx(math.exp(-0.2))
        assert score.value == pytest.approx(0.3499, abs=1e-4)

    def test_no_shared_unigrams_without_smoothing(self):
        cfg = BleuConfig(smoothing="none")
        assert sentence_bleu(["x", "y"], ["a", "b", "c"], cfg).value == 0.0

    def test_unigram_bleu_is_precision_times_brevity(self):
        cfg = BleuConfig(max_n=1, smoothing="none")
        hyp, ref = ["a", "a", "b", "c"], ["a", "b", "b", "d", "e"]
        matches, total = brute_clipped(hyp, ref, 1)
        expected = matches / total * math.exp(1 - len(ref) / len(hyp))
        assert sentence_bleu(hyp, ref, cfg).value == pytest.approx(expected, abs=1e-12)

    def test_shared_token_never_lowers_unigram_matches(self):
        hyp, ref = ["a", "x"], ["a", "b", "c"]
        before, _ = brute_clipped(hyp, ref, 1)
        after, _ = brute_clipped(hyp + ["b"], ref, 1)
        assert after >= before
        assert sentence_bleu(hyp + ["b"], ref).precisions[0] >= sentence_bleu(hyp, ref).precisions[0]

    def test_empty_sequence_rejected(self):
        with pytest.raises(EmptyText):
            sentence_bleu([], REF)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            BleuConfig(max_n=0)
        with pytest.raises(ConfigError):
            BleuConfig(smoothing="laplace")

    @pytest.mark.parametrize("hyp,ref", random_pairs())
    def test_matches_brute_force(self, hyp, ref):
        value = sentence_bleu(hyp, ref).value
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(brute_bleu(hyp, ref), abs=1e-12)

    @pytest.mark.parametrize("hyp,ref", [
        (HYP, REF),
        (["what", "was", "the", "reaction", "?"], ["what", "was", "the", "reaction", "to", "the", "album", "?"]),
        (["the", "cat", "sat", "on", "the", "mat", "today"], ["the", "cat", "is", "on", "the", "mat"]),
    ])
    def test_agrees_with_nltk(self, hyp, ref):
        bleu_score = pytest.importorskip("nltk.translate.bleu_score")
        expected = bleu_score.sentence_bleu([ref], hyp, smoothing_function=bleu_score.SmoothingFunction().method3)
        assert sentence_bleu(hyp, ref).value == pytest.approx(expected, abs=1e-9)


class TestRouge:
    def test_rouge1_hand_count(self):
        score = rouge_n(["a", "b", "c"], ["a", "c", "d"], 1)
        assert score.value == pytest.approx(2 / 3)
        assert score.extras["precision"] == pytest.approx(2 / 3)
        assert score.extras["recall"] == pytest.approx(2 / 3)

    def test_rouge_identity_and_disjoint(self):
        assert rouge_n(REF, REF, 1).value == 1.0
        assert rouge_n(["x"], ["y"], 1).value == 0.0
        assert rouge_l(REF, REF).value == 1.0
        assert rouge_l(["x"], ["y"]).value == 0.0

    def test_rouge_l_hand_lcs(self):
        score = rouge_l(["a", "b", "c"], ["a", "c", "d"])
        assert score.extras["lcs"] == 2
        assert score.value == pytest.approx(2 / 3)

    @pytest.mark.parametrize("hyp,ref", random_pairs(seed=18))
    def test_lcs_matches_recursive_reference(self, hyp, ref):
        assert lcs_length(hyp, ref) == brute_lcs(tuple(hyp), tuple(ref))

    def test_corpus_rouge_scores_empty_outputs_zero(self):
        result = corpus_rouge([["a", "b"], []], [["a", "b"], ["c"]])
        assert result["rouge1"] == pytest.approx(0.5)
        assert result["rougeL"] == pytest.approx(0.5)

    @pytest.mark.parametrize("hyp,ref", random_pairs(seed=19))
    @pytest.mark.parametrize("n", [1, 2])
    def test_rouge_n_matches_brute_force(self, hyp, ref, n):
        matches, hyp_total = brute_clipped(hyp, ref, n)
        ref_total = len(brute_ngrams(ref, n))
        p = matches / hyp_total if hyp_total else 0.0
        r = matches / ref_total if ref_total else 0.0
        expected = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert rouge_n(hyp, ref, n).value == pytest.approx(expected, abs=1e-12)
