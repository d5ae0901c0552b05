import math

import numpy as np
import pytest

from qapipe.core import Passage, QAExample, Question, ScoredList
from qapipe.fixture import separable_rerank_fixture
from qapipe.ranking import (
    LexicalPairFeatures,
    LinearReranker,
    RerankHyper,
    build_training_instance,
    ce_loss_and_grad,
    passage_probs,
    rerank_ce_loss,
    rerank_probs,
    rescore,
    retrieve,
    train_reranker,
    TrainingInstance,
)


def _corpus():
    return {
        "p1": Passage("p1", "", "zebra quark lantern"),
        "p2": Passage("p2", "", "zebra quark otherwise"),
        "p3": Passage("p3", "", "entirely unrelated words"),
    }


class TestRetrieve:
    def test_full_token_overlap_ranks_first(self):
        corpus = _corpus()
        q = Question("q", "zebra quark lantern")
        run = retrieve(q, corpus, 3)
        assert run.ids()[0] == "p1"

    def test_k_equals_corpus_gives_total_order(self):
        corpus = _corpus()
        run = retrieve(Question("q", "zebra"), corpus, 3)
        assert sorted(run.ids()) == ["p1", "p2", "p3"]

    def test_score_ties_break_by_passage_id(self):
        corpus = {
            "pb": Passage("pb", "", "same words here"),
            "pa": Passage("pa", "", "same words here"),
        }
        run = retrieve(Question("q", "same words"), corpus, 2)
        assert run.ids() == ("pa", "pb")

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty corpus"):
            retrieve(Question("q", "x"), {}, 1)


class TestRerankProbs:
    def test_uniform(self):
        sl = ScoredList.from_scores("q", {f"p{i}": 0.0 for i in range(4)})
        d = rerank_probs(sl)
        for pid in sl.ids():
            assert d.log_prob(pid) == pytest.approx(math.log(0.25), abs=1e-12)

    def test_hand_softmax(self):
        sl = ScoredList.from_scores("q", {"p1": math.log(3.0), "p2": 0.0})
        d = rerank_probs(sl)
        assert d.prob("p1") == pytest.approx(0.75)
        assert d.prob("p2") == pytest.approx(0.25)

    def test_single_candidate(self):
        d = rerank_probs(ScoredList.from_scores("q", {"p1": 2.5}))
        assert d.prob("p1") == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty candidates"):
            rerank_probs(ScoredList("q", ()))

    def test_argmax_preserved_and_shift_invariant(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            scores = {f"p{i}": float(s) for i, s in enumerate(rng.normal(0, 3, 6))}
            sl = ScoredList.from_scores("q", scores)
            d = passage_probs(sl)
            assert d.argmax() == sl.ids()[0]
            shifted = passage_probs(ScoredList.from_scores("q", {k: v + 11.5 for k, v in scores.items()}))
            for pid in sl.ids():
                assert shifted.log_prob(pid) == pytest.approx(d.log_prob(pid), abs=1e-9)


class TestBuildTrainingInstance:
    def _world(self):
        corpus = {
            "g": Passage("g", "", "golden but answerless text"),
            "m1": Passage("m1", "", "the answer paris is here"),
            "m2": Passage("m2", "", "another paris mention"),
            "n1": Passage("n1", "", "noise one"),
            "n2": Passage("n2", "", "noise two"),
            "n3": Passage("n3", "", "noise three"),
        }
        run = ScoredList.from_scores(
            "q", {"n1": 6.0, "m1": 5.0, "n2": 4.0, "m2": 3.0, "n3": 2.0, "g": 1.0}
        )
        return corpus, run

    def test_golden_is_positive_regardless_of_rank(self):
        corpus, run = self._world()
        ex = QAExample(Question("q", "where?", ("paris",)), "g")
        hyper = RerankHyper(instance_size=3, negative_pool=6)
        inst = build_training_instance(ex, run, hyper, np.random.default_rng(0), corpus)
        assert inst.positive == "g"
        assert set(inst.negatives) <= {"n1", "n2", "n3"}

    def test_best_ranked_match_is_positive(self):
        corpus, run = self._world()
        ex = QAExample(Question("q", "where?", ("paris",)))
        hyper = RerankHyper(instance_size=3, negative_pool=6)
        inst = build_training_instance(ex, run, hyper, np.random.default_rng(0), corpus)
        assert inst.positive == "m1"

    def test_insufficient_negatives_returns_none(self):
        corpus, run = self._world()
        ex = QAExample(Question("q", "where?", ("paris",)))
        # non-matching candidates are n1, n2, n3, g: four, so five are too many
        hyper = RerankHyper(instance_size=6, negative_pool=6)
        assert build_training_instance(ex, run, hyper, np.random.default_rng(0), corpus) is None

    def test_negatives_never_contain_match(self):
        corpus, run = self._world()
        ex = QAExample(Question("q", "where?", ("paris",)))
        hyper = RerankHyper(instance_size=3, negative_pool=6)
        for seed in range(20):
            inst = build_training_instance(ex, run, hyper, np.random.default_rng(seed), corpus)
            assert not set(inst.negatives) & {"m1", "m2"}

    def test_filter_contract_violation(self):
        corpus, run = self._world()
        ex = QAExample(Question("q", "where?", ("zurich",)))
        with pytest.raises(ValueError, match="filter contract"):
            build_training_instance(
                ex, run, RerankHyper(instance_size=3, negative_pool=6), np.random.default_rng(0), corpus
            )

    def test_sampling_deterministic_under_seed(self):
        corpus, run = self._world()
        ex = QAExample(Question("q", "where?", ("paris",)))
        hyper = RerankHyper(instance_size=3, negative_pool=6)
        a = build_training_instance(ex, run, hyper, np.random.default_rng(42), corpus)
        b = build_training_instance(ex, run, hyper, np.random.default_rng(42), corpus)
        assert a == b


class TestRerankCELoss:
    def test_uniform_24(self):
        scores = {f"p{i}": 0.0 for i in range(24)}
        assert rerank_ce_loss(scores, "p0") == pytest.approx(math.log(24.0))

    def test_dominant_positive(self):
        scores = {f"p{i}": 0.0 for i in range(1, 24)}
        scores["pos"] = 50.0
        assert rerank_ce_loss(scores, "pos") == pytest.approx(0.0, abs=1e-9)

    def test_two_equal(self):
        assert rerank_ce_loss({"a": 1.0, "b": 1.0}, "a") == pytest.approx(math.log(2.0))

    def test_missing_positive(self):
        with pytest.raises(ValueError, match="missing"):
            rerank_ce_loss({"a": 1.0}, "z")


class TestTraining:
    def test_separable_fixture_converges(self):
        instances, questions, corpus = separable_rerank_fixture()
        provider = LinearReranker(LexicalPairFeatures(idf={}))
        hyper = RerankHyper(instance_size=4, negative_pool=4, learning_rate=0.5, epochs=300)
        result = train_reranker(instances, provider, hyper, questions=questions, corpus=corpus)
        assert result.loss_trace[-1] < 0.05

    def test_zero_learning_rate(self):
        instances, questions, corpus = separable_rerank_fixture(4)
        provider = LinearReranker(LexicalPairFeatures(idf={}))
        hyper = RerankHyper(instance_size=4, negative_pool=4, learning_rate=0.0, epochs=10)
        result = train_reranker(instances, provider, hyper, questions=questions, corpus=corpus)
        assert len(set(result.loss_trace)) == 1
        assert np.all(result.weights == 0.0)

    def test_training_bit_reproducible(self):
        instances, questions, corpus = separable_rerank_fixture()
        hyper = RerankHyper(instance_size=4, negative_pool=4, learning_rate=0.3, epochs=40)
        runs = []
        for _ in range(2):
            provider = LinearReranker(LexicalPairFeatures(idf={}))
            runs.append(
                train_reranker(instances, provider, hyper, questions=questions, corpus=corpus)
            )
        assert np.array_equal(runs[0].weights, runs[1].weights)
        assert runs[0].loss_trace == runs[1].loss_trace

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        eps = 1e-5
        for _ in range(50):
            n, d = int(rng.integers(2, 9)), int(rng.integers(1, 6))
            F = rng.normal(0, 2, (n, d))
            w = rng.normal(0, 1, d)
            pos = int(rng.integers(0, n))
            _, grad = ce_loss_and_grad(F, pos, w)
            fd = np.zeros(d)
            for j in range(d):
                wp, wm = w.copy(), w.copy()
                wp[j] += eps
                wm[j] -= eps
                fd[j] = (ce_loss_and_grad(F, pos, wp)[0] - ce_loss_and_grad(F, pos, wm)[0]) / (2 * eps)
            err = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-8)
            assert err < 1e-4


def test_rescore_orders_by_provider():
    corpus = _corpus()
    run = ScoredList.from_scores("q", {"p1": 0.1, "p2": 0.2, "p3": 0.3})

    class Flip:
        def score(self, question, passage):
            return -run.score_of(passage.id)

    out = rescore(Question("q", "x"), run, Flip(), corpus)
    assert out.ids() == ("p1", "p2", "p3")


def test_training_instance_invariants():
    with pytest.raises(ValueError):
        TrainingInstance("q", "p", ("p",))
    with pytest.raises(ValueError):
        TrainingInstance("q", "p", ("a", "a"))
