"""Lexical retrieval and trainable passage reranking.

The retrieval/rerank scorers sit behind a small provider interface so large
neural scorers can be swapped in without touching the pipeline math. The
bundled providers are a TF-IDF cosine retriever and a linear reranker over
lexical pair features, trained with cross-entropy over one positive and
uniformly sampled hard negatives.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import LogDist, Passage, QAExample, Question, ScoredList, log_sum_exp, softmax_over_set
from .matching import exact_match_spans, tokenize


class ScoreProvider(Protocol):
    def score(self, question: Question, passage: Passage) -> float: ...


@dataclass(frozen=True)
class RerankHyper:
    """Reranker training and sampling configuration."""

    instance_size: int = 24
    negative_pool: int = 400
    rescore_pool: int = 200
    learning_rate: float = 1.0
    epochs: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.instance_size < 2:
            raise ValueError("instance_size must be >= 2")
        if self.negative_pool < self.instance_size:
            raise ValueError("negative_pool must be >= instance_size")


@dataclass(frozen=True)
class TrainingInstance:
    """One positive passage plus its sampled hard negatives."""

    question_id: str
    positive: str
    negatives: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if self.positive in self.negatives:
            raise ValueError("positive must not appear among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValueError("negatives must be distinct")


class TfidfScorer:
    """TF-IDF cosine over word tokens of title + context."""

    def __init__(self, corpus: Mapping[str, Passage]):
        if not corpus:
            raise ValueError("empty corpus")
        df: Counter[str] = Counter()
        self._doc_tf: dict[str, Counter[str]] = {}
        for pid, passage in corpus.items():
            toks = tokenize(passage.title).tokens + tokenize(passage.context).tokens
            tf = Counter(toks)
            self._doc_tf[pid] = tf
            df.update(tf.keys())
        n_docs = len(corpus)
        self.idf = {t: math.log((n_docs + 1) / (c + 1)) + 1.0 for t, c in df.items()}
        self._doc_vec: dict[str, dict[str, float]] = {}
        self._doc_norm: dict[str, float] = {}
        for pid, tf in self._doc_tf.items():
            vec = {t: c * self.idf[t] for t, c in tf.items()}
            self._doc_vec[pid] = vec
            self._doc_norm[pid] = math.sqrt(math.fsum(w * w for w in vec.values()))

    def _question_vec(self, question: Question) -> tuple[dict[str, float], float]:
        tf = Counter(tokenize(question.text).tokens)
        vec = {t: c * self.idf.get(t, 1.0) for t, c in tf.items()}
        norm = math.sqrt(math.fsum(w * w for w in vec.values()))
        return vec, norm

    def score(self, question: Question, passage: Passage) -> float:
        q_vec, q_norm = self._question_vec(question)
        d_vec = self._doc_vec.get(passage.id)
        if d_vec is None:
            raise KeyError(f"passage {passage.id!r} was not indexed")
        d_norm = self._doc_norm[passage.id]
        if q_norm == 0.0 or d_norm == 0.0:
            return 0.0
        dot = math.fsum(w * d_vec[t] for t, w in q_vec.items() if t in d_vec)
        return dot / (q_norm * d_norm)

    def score_all(self, question: Question, corpus: Mapping[str, Passage]) -> dict[str, float]:
        q_vec, q_norm = self._question_vec(question)
        scores = {}
        for pid in corpus:
            d_vec = self._doc_vec[pid]
            d_norm = self._doc_norm[pid]
            if q_norm == 0.0 or d_norm == 0.0:
                scores[pid] = 0.0
                continue
            dot = math.fsum(w * d_vec[t] for t, w in q_vec.items() if t in d_vec)
            scores[pid] = dot / (q_norm * d_norm)
        return scores


def retrieve(
    question: Question,
    corpus: Mapping[str, Passage],
    k: int,
    provider: TfidfScorer | None = None,
) -> ScoredList:
    """Top-k passages under the provider (TF-IDF cosine by default)."""
    if not corpus:
        raise ValueError("empty corpus")
    if k < 1:
        raise ValueError("k must be >= 1")
    if provider is None:
        provider = TfidfScorer(corpus)
    if isinstance(provider, TfidfScorer):
        scores = provider.score_all(question, corpus)
    else:
        scores = {pid: provider.score(question, p) for pid, p in corpus.items()}
    return ScoredList.from_scores(question.id, scores).top(k)


def passage_probs(candidates: ScoredList) -> LogDist:
    """Normalize a scored list's raw scores into a distribution over exactly
    its passages."""
    if len(candidates) == 0:
        raise ValueError("empty candidates")
    return softmax_over_set(dict(candidates.entries))


def rerank_probs(candidates: ScoredList) -> LogDist:
    """Probability that each candidate passage answers the question, from
    rerank scores."""
    return passage_probs(candidates)


def rescore(
    question: Question,
    candidates: ScoredList,
    provider: ScoreProvider,
    corpus: Mapping[str, Passage],
) -> ScoredList:
    """Re-score candidates with a (more expensive) provider."""
    scores = {pid: provider.score(question, corpus[pid]) for pid in candidates.ids()}
    return ScoredList.from_scores(question.id, scores)


def build_training_instance(
    example: QAExample,
    retrieved: ScoredList,
    hyper: RerankHyper,
    rng: np.random.Generator,
    corpus: Mapping[str, Passage],
) -> TrainingInstance | None:
    """Pick the positive passage and sample hard negatives for one example.

    The positive is the golden passage when known, otherwise the best-ranked
    retrieved passage containing an exact answer match. Negatives are drawn
    uniformly without replacement from the top negative_pool candidates that
    contain no answer match; returns None when fewer than instance_size - 1
    such candidates exist.
    """
    answer_seqs = [tokenize(a) for a in example.question.gold_answers]
    answer_seqs = [a for a in answer_seqs if a.tokens]
    token_cache: dict[str, tuple[str, ...]] = {}

    def has_match(pid: str) -> bool:
        toks = token_cache.get(pid)
        if toks is None:
            toks = tokenize(corpus[pid].context).tokens
            token_cache[pid] = toks
        return any(exact_match_spans(toks, a.tokens) for a in answer_seqs)

    pool = retrieved.top(hyper.negative_pool).ids()

    if example.golden_passage_id is not None:
        positive = example.golden_passage_id
    else:
        positive = next((pid for pid in pool if has_match(pid)), None)
        if positive is None:
            raise ValueError(
                f"question {example.question.id!r} has no golden passage and no "
                "matching retrieved passage (filter contract violated)"
            )
    negatives = [pid for pid in pool if pid != positive and not has_match(pid)]
    n_neg = hyper.instance_size - 1
    if len(negatives) < n_neg:
        return None
    picked = rng.choice(len(negatives), size=n_neg, replace=False)
    return TrainingInstance(
        question_id=example.question.id,
        positive=positive,
        negatives=tuple(negatives[i] for i in picked),
    )


def rerank_ce_loss(scores: Mapping[str, float], positive: str) -> float:
    """Cross-entropy of the positive passage under softmax of the scores."""
    if positive not in scores:
        raise ValueError(f"positive {positive!r} missing from scores")
    return log_sum_exp(list(scores.values())) - scores[positive]


def ce_loss_and_grad(
    features: np.ndarray, pos_idx: int, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy loss and its gradient for a linear scorer.

    features has one row per candidate; the score of candidate i is
    features[i] @ weights and the loss is -log softmax(scores)[pos_idx].
    """
    scores = features @ weights
    m = scores.max()
    exp = np.exp(scores - m)
    z = exp.sum()
    loss = math.log(z) + m - scores[pos_idx]
    p = exp / z
    p[pos_idx] -= 1.0
    return float(loss), features.T @ p


@dataclass
class LexicalPairFeatures:
    """Cheap question-passage features for the linear reranker.

    Features: distinct-token overlap count, IDF-weighted overlap, reciprocal
    retrieval rank (0 when the passage is absent from the question's run),
    and passage/question length ratio.
    """

    idf: Mapping[str, float]
    runs: Mapping[str, ScoredList] | None = None
    names: tuple[str, ...] = (
        "overlap_count",
        "idf_overlap",
        "rank_reciprocal",
        "length_ratio",
    )

    def vector(self, question: Question, passage: Passage) -> np.ndarray:
        q_tokens = tokenize(question.text).tokens
        p_tokens = tokenize(passage.context).tokens
        q_set, p_set = set(q_tokens), set(p_tokens)
        common = q_set & p_set
        overlap = float(len(common))
        idf_overlap = math.fsum(self.idf.get(t, 1.0) for t in common)
        rank_recip = 0.0
        if self.runs is not None and question.id in self.runs:
            ids = self.runs[question.id].ids()
            if passage.id in ids:
                rank_recip = 1.0 / (ids.index(passage.id) + 1)
        ratio = len(p_tokens) / (len(q_tokens) + len(p_tokens) + 1)
        return np.array([overlap, idf_overlap, rank_recip, ratio], dtype=np.float64)


class LinearReranker:
    """Trainable linear model over pair features; a ScoreProvider."""

    def __init__(self, features: LexicalPairFeatures, weights: np.ndarray | None = None):
        self.features = features
        dim = len(features.names)
        self.weights = (
            np.zeros(dim, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64)
        )
        if self.weights.shape != (dim,):
            raise ValueError("weight dimension does not match feature count")

    def featurize(self, question: Question, passage: Passage) -> np.ndarray:
        return self.features.vector(question, passage)

    def score(self, question: Question, passage: Passage) -> float:
        return float(self.featurize(question, passage) @ self.weights)


@dataclass(frozen=True)
class TrainResult:
    weights: np.ndarray
    loss_trace: tuple[float, ...]


def materialize_instances(
    instances: Sequence[TrainingInstance],
    provider: LinearReranker,
    questions: Mapping[str, Question],
    corpus: Mapping[str, Passage],
) -> list[np.ndarray]:
    """Feature matrices for training; row 0 of each matrix is the positive."""
    out = []
    for inst in instances:
        q = questions[inst.question_id]
        rows = [provider.featurize(q, corpus[pid]) for pid in (inst.positive, *inst.negatives)]
        out.append(np.stack(rows))
    return out


def train_reranker(
    instances: Sequence[TrainingInstance],
    provider: LinearReranker,
    hyper: RerankHyper,
    *,
    questions: Mapping[str, Question],
    corpus: Mapping[str, Passage],
) -> TrainResult:
    """Full-batch gradient descent on mean cross-entropy.

    The loss trace records the mean loss at the start of each epoch, so a
    zero learning rate yields a constant trace. The provider's weights are
    updated in place and also returned.
    """
    if not instances:
        raise ValueError("empty training set")
    mats = materialize_instances(instances, provider, questions, corpus)
    w = provider.weights.copy()
    trace: list[float] = []
    for _ in range(hyper.epochs):
        total_loss = 0.0
        grad = np.zeros_like(w)
        for F in mats:
            loss, g = ce_loss_and_grad(F, 0, w)
            total_loss += loss
            grad += g
        grad /= len(mats)
        if not np.all(np.isfinite(grad)):
            raise RuntimeError(f"non-finite gradient during reranker training: {grad!r}")
        trace.append(total_loss / len(mats))
        w = w - hyper.learning_rate * grad
    provider.weights = w
    return TrainResult(weights=w, loss_trace=tuple(trace))
