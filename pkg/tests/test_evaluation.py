"""BLEU scoring against an independently written brute-force oracle."""

import math
import random

import pytest
from oracles import oracle_bleu

from captionforge.errors import DataError
from captionforge.evaluation import (
    EvalPair,
    corpus_bleu,
    format_table,
    modified_precision,
    ngram_counts,
    paragraph_bleu,
)


def _random_corpus(rng, n_pairs, vocab=8, max_refs=3):
    words = [f"w{i}" for i in range(vocab)]
    pairs = []
    for _ in range(n_pairs):
        cand = [rng.choice(words) for _ in range(rng.randint(1, 12))]
        refs = [[rng.choice(words) for _ in range(rng.randint(1, 12))] for _ in range(rng.randint(1, max_refs))]
        pairs.append(EvalPair(candidate=cand, references=refs))
    return pairs


class TestNgramCounts:
    def test_unigrams_with_multiplicity(self):
        assert ngram_counts(["a", "b", "a"], 1) == {("a",): 2, ("b",): 1}

    def test_bigrams(self):
        assert ngram_counts(["a", "b", "a"], 2) == {("a", "b"): 1, ("b", "a"): 1}

    def test_short_sequence_empty(self):
        assert ngram_counts(["a", "b", "c"], 4) == {}


class TestModifiedPrecision:
    def test_the_seven_times_clipping(self):
        pair = EvalPair(candidate=["the"] * 7, references=[["the", "cat", "is", "on", "the", "mat"]])
        assert modified_precision([pair], 1) == (2, 7)

    def test_exact_match_is_unclipped(self):
        pair = EvalPair(candidate=["a", "b", "c"], references=[["a", "b", "c"]])
        for n in (1, 2, 3):
            clipped, total = modified_precision([pair], n)
            assert clipped == total > 0

    def test_disjoint_vocabulary(self):
        pair = EvalPair(candidate=["x", "y"], references=[["a", "b"]])
        assert modified_precision([pair], 1) == (0, 2)


class TestCorpusBleu:
    def test_perfect_match_scores_one(self):
        pairs = [
            EvalPair(candidate=list("abcde"), references=[list("abcde")]),
            EvalPair(candidate=list("wxyz"), references=[list("wxyz")]),
        ]
        report = corpus_bleu(pairs)
        assert report.scores == [1.0, 1.0, 1.0, 1.0]
        assert report.bp == 1.0

    def test_zero_overlap_scores_zero(self):
        pairs = [EvalPair(candidate=["x", "y", "z", "q"], references=[["a", "b", "c", "d"]])]
        assert corpus_bleu(pairs).scores == [0.0, 0.0, 0.0, 0.0]

    def test_zero_precision_zeroes_higher_orders(self):
        # unigram overlap but no shared bigram
        pairs = [EvalPair(candidate=["a", "x", "b"], references=[["a", "b"]])]
        report = corpus_bleu(pairs)
        assert report.scores[0] > 0
        assert report.scores[1] == report.scores[2] == report.scores[3] == 0.0

    def test_matches_bruteforce_on_100_random_corpora(self):
        rng = random.Random(0)
        pairs = _random_corpus(rng, 100)
        report = corpus_bleu(pairs)
        expected = oracle_bleu([p.candidate for p in pairs], [p.references for p in pairs], 4)
        for got, want in zip(report.scores, expected):
            assert abs(got - want) < 1e-12

    def test_pair_order_permutation_bitwise_invariant(self):
        rng = random.Random(1)
        pairs = _random_corpus(rng, 30)
        a = corpus_bleu(pairs)
        shuffled = pairs[:]
        rng.shuffle(shuffled)
        b = corpus_bleu(shuffled)
        assert a.scores == b.scores and a.bp == b.bp

    def test_corpus_duplication_invariant(self):
        rng = random.Random(2)
        pairs = _random_corpus(rng, 20)
        a = corpus_bleu(pairs)
        b = corpus_bleu(pairs + pairs)
        for x, y in zip(a.scores, b.scores):
            assert abs(x - y) < 1e-12

    def test_scores_bounded(self):
        rng = random.Random(3)
        for trial in range(20):
            pairs = _random_corpus(rng, 5)
            for s in corpus_bleu(pairs).scores:
                assert 0.0 <= s <= 1.0

    def test_brevity_penalty_boundary(self):
        long_cand = EvalPair(candidate=["a"] * 6, references=[["a"] * 4])
        assert corpus_bleu([long_cand]).bp == 1.0
        short_cand = EvalPair(candidate=["a"] * 3, references=[["a"] * 6])
        assert corpus_bleu([short_cand]).bp == pytest.approx(math.exp(1 - 6 / 3), abs=1e-15)

    def test_closest_reference_length_ties_prefer_shorter(self):
        # candidate length 3; refs of length 2 and 4 tie on distance -> r = 2 -> bp = 1
        pair = EvalPair(candidate=["a", "b", "c"], references=[["a", "b"], ["a", "b", "c", "d"]])
        assert corpus_bleu([pair]).reference_len == 2

    def test_empty_pairs_rejected(self):
        with pytest.raises(DataError):
            corpus_bleu([])

    def test_smoothing_flag_rescues_zero_precisions(self):
        pairs = [EvalPair(candidate=["a", "x", "b"], references=[["a", "b"]])]
        assert corpus_bleu(pairs, smooth=True).scores[3] > 0.0


class TestParagraphBleu:
    def test_identical_paragraphs_score_one(self):
        pred = {"v1": [["a", "man"], ["runs", "fast", "today"]]}
        assert paragraph_bleu(pred, dict(pred)).scores == [1.0] * 4

    def test_single_sentence_equals_corpus_bleu(self):
        rng = random.Random(4)
        sentences = {f"v{i}": [[rng.choice("abcdef") for _ in range(6)]] for i in range(10)}
        refs = {k: [[rng.choice("abcdef") for _ in range(6)]] for k in sentences}
        para = paragraph_bleu(sentences, refs)
        flat_pairs = [EvalPair(candidate=sentences[k][0], references=[refs[k][0]]) for k in sorted(sentences)]
        flat = corpus_bleu(flat_pairs)
        assert para.scores == flat.scores

    def test_matches_bruteforce_on_synthetic_paragraphs(self):
        rng = random.Random(5)
        pred, ref = {}, {}
        for i in range(20):
            vid = f"v{i}"
            pred[vid] = [[rng.choice("abcd") for _ in range(4)] for _ in range(rng.randint(2, 4))]
            ref[vid] = [[rng.choice("abcd") for _ in range(4)] for _ in range(rng.randint(2, 4))]
        report = paragraph_bleu(pred, ref)
        cands = [[t for s in pred[v] for t in s] for v in sorted(pred)]
        refs = [[[t for s in ref[v] for t in s]] for v in sorted(ref)]
        expected = oracle_bleu(cands, refs, 4)
        for got, want in zip(report.scores, expected):
            assert abs(got - want) < 1e-12

    def test_id_mismatch_lists_difference(self):
        with pytest.raises(DataError, match="v2"):
            paragraph_bleu({"v1": [["a"]]}, {"v1": [["a"]], "v2": [["b"]]})


def test_format_table_mentions_all_orders():
    pairs = [EvalPair(candidate=list("abcd"), references=[list("abcd")])]
    table = format_table(corpus_bleu(pairs))
    for n in range(1, 5):
        assert f"BLEU-{n}" in table
