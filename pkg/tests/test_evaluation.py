"""BLEU, unigram entropy, reply length, multi-system reports."""

import json
import math

import numpy as np
import pytest

from retgen.corpus import Vocabulary
from retgen.ensemble import Candidate, ChatResponse
from retgen.evaluation import (
    UnigramModel, bleu, build_unigram, corpus_entropy, evaluate_systems,
    mean_length, modified_precisions,
)

from util import bleu_oracle, random_token_seq


class TestBleu:
    def test_identical_corpus_scores_100(self):
        corpus = [["a", "b", "c", "d", "e"], ["f", "g", "h", "i"]]
        for n in range(1, 5):
            assert bleu(corpus, corpus, n) == pytest.approx(100.0, abs=1e-9)

    def test_hand_computed_unigram(self):
        # candidate "a b c" vs reference "a b d": precision 2/3, BP = 1
        score = bleu([["a", "b", "c"]], [["a", "b", "d"]], max_n=1)
        assert score == pytest.approx(100 * 2 / 3, abs=0.01)

    def test_hand_computed_bigram(self):
        # bigram precision 1/2; BLEU-2 = 100*sqrt(2/3 * 1/2)
        score = bleu([["a", "b", "c"]], [["a", "b", "d"]], max_n=2)
        assert score == pytest.approx(100 * math.sqrt(1 / 3), abs=0.01)

    def test_brevity_penalty_applied(self):
        # candidate shorter than reference: BP = exp(1 - 4/2)
        score = bleu([["a", "b"]], [["a", "b", "c", "d"]], max_n=1)
        assert score == pytest.approx(100 * math.exp(-1.0), abs=1e-6)

    def test_clipping(self):
        # "the the the" vs "the cat": clipped count 1 of 3; candidate is
        # longer than the reference so no brevity penalty applies
        score = bleu([["the", "the", "the"]], [["the", "cat"]], max_n=1)
        assert score == pytest.approx(100 / 3, abs=1e-6)

    def test_oracle_equivalence_randomized(self):
        rng = np.random.default_rng(77)
        for trial in range(30):
            size = int(rng.integers(1, 12))
            cands = [random_token_seq(rng, 6, 1, 7) for _ in range(size)]
            refs = [random_token_seq(rng, 6, 1, 7) for _ in range(size)]
            for n in (1, 2, 3, 4):
                assert bleu(cands, refs, n) == pytest.approx(
                    bleu_oracle(cands, refs, n), abs=1e-9)

    def test_pair_order_invariance(self):
        rng = np.random.default_rng(3)
        cands = [random_token_seq(rng, 5, 1, 6) for _ in range(8)]
        refs = [random_token_seq(rng, 5, 1, 6) for _ in range(8)]
        base = bleu(cands, refs, 4)
        order = rng.permutation(8)
        shuffled = bleu([cands[i] for i in order], [refs[i] for i in order], 4)
        assert shuffled == pytest.approx(base, abs=1e-9)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [], 1)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bleu([["a"]], [["a"], ["b"]], 1)

    def test_all_empty_candidates_score_zero(self):
        assert bleu([[], []], [["a"], ["b"]], 2) == 0.0


class TestUnigram:
    def test_single_token_corpus(self):
        # V=4 (reserved rows only): "a" folds to UNK; p = (1+1)/(1+4)
        vocab = Vocabulary([])
        model = build_unigram([["a"]], vocab, alpha=1.0)
        assert math.exp(model.log_prob("a")) == pytest.approx(2 / 5, rel=1e-12)

    def test_probabilities_sum_to_one(self):
        vocab = Vocabulary(["x", "y", "z"])
        model = build_unigram([["x", "y"], ["z", "x"]], vocab, alpha=1.0)
        assert model.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert (model.probs > 0).all()

    def test_alpha_zero_is_mle(self):
        vocab = Vocabulary(["x", "y"])
        model = build_unigram([["x", "x", "y", "x"]], vocab, alpha=0.0)
        assert math.exp(model.log_prob("x")) == pytest.approx(0.75, rel=1e-12)
        assert math.exp(model.log_prob("y")) == pytest.approx(0.25, rel=1e-12)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_unigram([], Vocabulary(["x"]))


class TestEntropy:
    def test_uniform_model_gives_log_v(self):
        vocab = Vocabulary(["a", "b", "c", "d"])  # V = 8
        uniform = UnigramModel(probs=np.full(vocab.size, 1 / vocab.size),
                               vocab=vocab, alpha=0.0)
        replies = [["a", "b"], ["c"], ["d", "a", "b"]]
        expected = math.log(vocab.size)
        assert corpus_entropy(replies, uniform) == pytest.approx(expected, rel=1e-12)

    def test_hand_example_half_probability(self):
        vocab = Vocabulary([])
        model = UnigramModel(probs=np.full(4, 0.5), vocab=vocab, alpha=0.0)
        per_token = corpus_entropy([["a", "a"]], model, "per_token")
        per_reply = corpus_entropy([["a", "a"]], model, "per_reply")
        assert per_token == pytest.approx(math.log(2), rel=1e-12)
        assert per_reply == pytest.approx(2 * math.log(2), rel=1e-12)

    def test_bad_denominator_rejected(self):
        vocab = Vocabulary([])
        model = UnigramModel(probs=np.full(4, 0.25), vocab=vocab, alpha=1.0)
        with pytest.raises(ValueError):
            corpus_entropy([["a"]], model, "per_word")


class TestMeanLength:
    def test_example(self):
        assert mean_length([["a"], ["a", "b", "c"]]) == 2.0

    def test_all_empty(self):
        assert mean_length([[], []]) == 0.0

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            mean_length([])


def make_system(reply_fn):
    def respond(query):
        reply = reply_fn(query)
        return ChatResponse(reply=reply, provenance="generated",
                            candidates=[Candidate(reply=reply,
                                                  provenance="generated")])
    return respond


class TestEvaluateSystems:
    @pytest.fixture()
    def setup(self):
        vocab = Vocabulary(["a", "b", "c", "d"])
        unigram = build_unigram([["a", "b"], ["c", "d"]], vocab)
        test_set = [(["a"], ["a", "b", "c", "d"]),
                    (["c"], ["c", "d", "a", "b", "a"]),
                    (["b"], ["b", "a", "d", "c"])]
        return vocab, unigram, test_set

    def test_echo_system_scores_100(self, setup):
        _, unigram, test_set = setup
        refs = {tuple(q): r for q, r in test_set}
        echo = make_system(lambda q: refs[tuple(q)])
        report = evaluate_systems(test_set, [("echo", echo)], unigram)
        assert report.systems[0].bleu == pytest.approx([100.0] * 4, abs=1e-9)

    def test_constant_system_entropy(self, setup):
        _, unigram, test_set = setup
        const = make_system(lambda q: ["a", "b"])
        report = evaluate_systems(test_set, [("const", const)], unigram)
        expected = corpus_entropy([["a", "b"]], unigram, "per_token")
        assert report.systems[0].entropy_per_token == pytest.approx(expected)
        assert report.systems[0].mean_length == 2.0

    def test_identical_systems_identical_rows(self, setup):
        _, unigram, test_set = setup
        s1 = make_system(lambda q: ["a"])
        s2 = make_system(lambda q: ["a"])
        report = evaluate_systems(test_set, [("one", s1), ("two", s2)], unigram)
        a, b = report.systems
        assert (a.bleu, a.entropy_per_token, a.mean_length) == \
               (b.bleu, b.entropy_per_token, b.mean_length)

    def test_failures_counted_and_excluded(self, setup):
        _, unigram, test_set = setup

        def flaky(query):
            if query == ["c"]:
                raise RuntimeError("boom")
            return ChatResponse(reply=["a"], provenance="generated",
                                candidates=[Candidate(reply=["a"],
                                                      provenance="generated")])

        report = evaluate_systems(test_set, [("flaky", flaky)], unigram)
        assert report.systems[0].failures == 1
        assert report.systems[0].sample_count == 2

    def test_selection_only_for_ensembles(self, setup):
        _, unigram, test_set = setup

        def two_cand(query):
            cands = [Candidate(reply=["a"], provenance="retrieved", score=0.9),
                     Candidate(reply=["b"], provenance="generated", score=0.4)]
            return ChatResponse(reply=["a"], provenance="retrieved",
                                candidates=cands)

        single = make_system(lambda q: ["a"])
        report = evaluate_systems(test_set, [("ens", two_cand), ("solo", single)],
                                  unigram)
        assert report.systems[0].selection == {"retrieved": 1.0, "generated": 0.0}
        assert report.systems[1].selection is None

    def test_report_serialization(self, setup):
        _, unigram, test_set = setup
        echo = make_system(lambda q: ["a"])
        report = evaluate_systems(test_set, [("sys", echo)], unigram)
        doc = json.loads(report.to_json())
        assert doc["version"] == 1
        row = doc["systems"][0]
        assert set(row) >= {"name", "bleu", "precisions", "entropy_per_token",
                            "mean_length", "selection", "sample_count", "failures"}
        text = report.to_text()
        assert "BLEU-1" in text and "sys" in text

    def test_empty_test_set_rejected(self, setup):
        _, unigram, _ = setup
        with pytest.raises(ValueError):
            evaluate_systems([], [("x", make_system(lambda q: ["a"]))], unigram)


def test_modified_precisions_are_fractions():
    cands = [["a", "b"], ["c"]]
    refs = [["a", "x"], ["c"]]
    p = modified_precisions(cands, refs, 2)
    assert p[0] == pytest.approx(2 / 3)
    assert 0.0 < p[1] <= 1.0 or p[1] == pytest.approx(1e-9)
