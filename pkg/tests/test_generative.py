import math

import numpy as np
import pytest

from qapipe.core import Passage, Question, ScoredList
from qapipe.generative import (
    GenerativeOutput,
    TableScorer,
    UnigramScorer,
    assemble_reader_input,
    greedy_answer,
    rerank_answers,
)
from qapipe.matching import tokenize
from qapipe.reader import AnswerSpan


def _span(surface):
    return AnswerSpan("p", 0, 0, surface, -1.0, -1.0, -1.0, -1.0, -4.0)


_PASSAGES = [
    Passage("p1", "", "plzeň plzeň plzeň brews beer in plzeň near plzeň"),
    Passage("p2", "", "zurich is elsewhere entirely"),
]
_Q = Question("q1", "where is the brewery")


class TestTableScorer:
    def _scorer(self):
        return TableScorer(
            {"q1": {"plzeň": -0.2, "zurich": -3.0, "brno": -1.0}},
            greedy={"q1": "brno"},
        )

    def test_replays_table(self):
        scorer = self._scorer()
        out = rerank_answers(scorer, _Q, _PASSAGES, [_span("plzeň"), _span("zurich")])
        assert out == {"plzeň": -0.2, "zurich": -3.0}

    def test_duplicate_surfaces_scored_once(self):
        scorer = self._scorer()
        out = rerank_answers(scorer, _Q, _PASSAGES, [_span("plzeň"), _span("plzeň")])
        assert list(out) == ["plzeň"]

    def test_greedy_consistency(self):
        scorer = self._scorer()
        answer, lp = greedy_answer(scorer, _Q, _PASSAGES)
        assert answer == "brno"
        assert lp == scorer.answer_log_prob(_Q, _PASSAGES, answer)

    def test_missing_entry_names_question(self):
        scorer = self._scorer()
        with pytest.raises(RuntimeError, match="q1"):
            rerank_answers(scorer, _Q, _PASSAGES, [_span("unknown")])

    def test_rejects_positive_log_probs(self):
        with pytest.raises(ValueError):
            TableScorer({"q1": {"a": 0.5}}, greedy={})

    def test_greedy_must_be_in_table(self):
        with pytest.raises(ValueError):
            TableScorer({"q1": {"a": -1.0}}, greedy={"q1": "b"})


class TestUnigramScorer:
    def test_frequent_token_beats_absent_one(self):
        scorer = UnigramScorer()
        lp = rerank_answers(scorer, _Q, [_PASSAGES[0]], [_span("plzeň"), _span("zurich")])
        assert lp["plzeň"] > lp["zurich"]
        # hand computation: counts over passage 1 tokens, add-one smoothing
        counts = {}
        for tok in tokenize(_PASSAGES[0].context).tokens:
            counts[tok] = counts.get(tok, 0) + 1
        total = sum(counts.values())
        denom = total + len(counts) + 1
        assert lp["plzeň"] == pytest.approx(math.log((counts["plzeň"] + 1) / denom))
        assert lp["zurich"] == pytest.approx(math.log(1 / denom))

    def test_greedy_is_most_frequent_token(self):
        scorer = UnigramScorer()
        answer, lp = greedy_answer(scorer, _Q, [_PASSAGES[0]])
        assert answer == "plzeň"
        assert lp == pytest.approx(scorer.answer_log_prob(_Q, [_PASSAGES[0]], answer), abs=1e-9)

    def test_vocabulary_plus_oov_sums_to_one(self):
        scorer = UnigramScorer()
        probs = scorer.token_log_probs(_PASSAGES)
        total = math.fsum(math.exp(lp) for lp in probs.values())
        total += math.exp(scorer.oov_log_prob(_PASSAGES))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_all_log_probs_nonpositive(self):
        scorer = UnigramScorer()
        rng = np.random.default_rng(0)
        words = ["plzeň", "beer", "zurich", "unseen", "brews"]
        for _ in range(50):
            answer = " ".join(rng.choice(words, size=rng.integers(1, 4)))
            assert scorer.answer_log_prob(_Q, _PASSAGES, answer) <= 1e-12

    def test_empty_passages_rejected(self):
        with pytest.raises(ValueError):
            greedy_answer(UnigramScorer(), _Q, [])


class TestRerankAnswers:
    def test_permutation_invariant(self):
        scorer = UnigramScorer()
        spans = [_span("plzeň"), _span("beer"), _span("zurich")]
        a = rerank_answers(scorer, _Q, _PASSAGES, spans)
        b = rerank_answers(scorer, _Q, _PASSAGES, spans[::-1])
        assert a == b

    def test_empty_spans(self):
        with pytest.raises(ValueError, match="empty spans"):
            rerank_answers(UnigramScorer(), _Q, _PASSAGES, [])

    def test_accepts_raw_strings(self):
        out = rerank_answers(UnigramScorer(), _Q, _PASSAGES, ["beer"])
        assert set(out) == {"beer"}

    def test_length_normalization_off_by_default(self):
        scorer = UnigramScorer()
        raw = rerank_answers(scorer, _Q, _PASSAGES, ["plzeň brews beer"])
        normalized = rerank_answers(scorer, _Q, _PASSAGES, ["plzeň brews beer"], length_normalize=True)
        assert normalized["plzeň brews beer"] == pytest.approx(raw["plzeň brews beer"] / 3)


class TestAssembleReaderInput:
    def test_prefix_semantics(self):
        corpus = {p.id: p for p in _PASSAGES}
        run = ScoredList.from_scores("q1", {"p1": 2.0, "p2": 1.0})
        assert [p.id for p in assemble_reader_input(run, 1, corpus)] == ["p1"]
        assert [p.id for p in assemble_reader_input(run, 5, corpus)] == ["p1", "p2"]

    def test_v2_validation(self):
        with pytest.raises(ValueError):
            assemble_reader_input(ScoredList("q", ()), 0, {})


def test_generative_output_validation():
    with pytest.raises(ValueError):
        GenerativeOutput("q", "a", 0.5, {})
    with pytest.raises(ValueError):
        GenerativeOutput("q", "a", -0.5, {"x": 0.7})
    out = GenerativeOutput("q", "a", -0.5, {"x": -0.7})
    assert out.reranked == {"x": -0.7}
