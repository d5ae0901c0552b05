"""Component fusion: score aggregation over component log-probabilities, the
extractive/abstractive binary decision, fusion-dataset construction, and the
posterior-averaging ensemble baseline.

Both fusion heads are linear models over log features: aggregation is a
softmax regression over a question's candidate spans (marginalizing all
EM-correct candidates), the binary decision a logistic regression over the
pair (best aggregated score, greedy generative log-probability).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import LogDist, Question, log_sum_exp
from .generative import GenerativeOutput
from .metrics import (
    SOURCE_ABSTRACTIVE,
    SOURCE_EXTRACTIVE,
    Prediction,
    exact_match,
)
from .reader import AnswerSpan

FEATURE_ORDER = ("log_p_e", "log_p_g", "log_p_r", "log_p_rr")
_READER_FEATURES = {"e": "log_p_e", "g": "log_p_g"}
_RANKER_FEATURES = {"r": "log_p_r", "rr": "log_p_rr"}

MODE_NAIVE = "naive"
MODE_AGGR = "aggr"
MODE_AGGR_BD = "aggr+bd"
MODES = (MODE_NAIVE, MODE_AGGR, MODE_AGGR_BD)

BD_FEATURE_NAMES = ("s_agg", "s_g_star")


@dataclass(frozen=True)
class FeatureConfig:
    """Which component log-probabilities enter score aggregation."""

    readers: frozenset[str] = frozenset({"e", "g"})
    rankers: frozenset[str] = frozenset({"r", "rr"})

    def __post_init__(self):
        readers = frozenset(self.readers)
        rankers = frozenset(self.rankers)
        if not readers or not readers <= {"e", "g"}:
            raise ValueError("readers must be a non-empty subset of {e, g}")
        if not rankers <= {"r", "rr"}:
            raise ValueError("rankers must be a subset of {r, rr}")
        object.__setattr__(self, "readers", readers)
        object.__setattr__(self, "rankers", rankers)

    @classmethod
    def parse(cls, readers: str, rankers: str) -> "FeatureConfig":
        split = lambda s: frozenset(x for x in s.replace("+", ",").split(",") if x)
        return cls(readers=split(readers), rankers=split(rankers))

    @property
    def feature_names(self) -> tuple[str, ...]:
        active = {_READER_FEATURES[r] for r in self.readers}
        active |= {_RANKER_FEATURES[r] for r in self.rankers}
        return tuple(name for name in FEATURE_ORDER if name in active)


@dataclass(frozen=True)
class FusionFeatures:
    """Component log-probabilities of one candidate span."""

    log_p_e: float
    log_p_g: float
    log_p_r: float
    log_p_rr: float

    def __post_init__(self):
        for name in FEATURE_ORDER:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def select(self, feature_names: Sequence[str]) -> np.ndarray:
        return np.array([getattr(self, name) for name in feature_names], dtype=np.float64)

    @classmethod
    def from_span(
        cls, span: AnswerSpan, log_p_g: float, log_p_r: float, log_p_rr: float
    ) -> "FusionFeatures":
        return cls(span.log_p_e, log_p_g, log_p_r, log_p_rr)


@dataclass(frozen=True)
class FusionCandidate:
    """A decoded span together with its fusion features."""

    span: AnswerSpan
    features: FusionFeatures

    @property
    def sort_key(self) -> tuple:
        return (self.span.passage_id, self.span.start, self.span.end)


@dataclass(frozen=True)
class AggregationModel:
    """Linear score-aggregation head: w over active log features, plus bias."""

    feature_names: tuple[str, ...]
    w: tuple[float, ...]
    b: float

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if len(self.w) != len(self.feature_names):
            raise ValueError("weight dimension must equal active feature count")

    def score(self, features: FusionFeatures) -> float:
        vec = features.select(self.feature_names)
        return float(vec @ np.asarray(self.w)) + self.b


@dataclass(frozen=True)
class BinaryDecider:
    """Logistic head over [s_agg, s_g_star] choosing the answer source."""

    w: tuple[float, float]
    b: float

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if len(self.w) != 2 or not all(math.isfinite(x) for x in (*self.w, self.b)):
            raise ValueError("decider needs two finite weights and a finite bias")

    def logit(self, s_agg: float, s_g_star: float) -> float:
        return self.w[0] * s_agg + self.w[1] * s_g_star + self.b


@dataclass(frozen=True)
class AggregationItem:
    """A question's candidates with their correctness marks."""

    question_id: str
    candidates: tuple[tuple[FusionFeatures, bool], ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not any(correct for _, correct in self.candidates):
            raise ValueError("aggregation items need at least one correct candidate")


@dataclass(frozen=True)
class BDItem:
    """One binary-decision training case: exactly one prediction is correct."""

    question_id: str
    s_agg: float
    s_g_star: float
    target: int

    def __post_init__(self):
        if self.target not in (0, 1):
            raise ValueError("target must be 0 or 1")


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.1
    epochs: int = 200


def build_aggregation_dataset(
    pipeline_outputs: Mapping[str, Sequence[tuple[str, FusionFeatures]]],
    gold: Mapping[str, Sequence[str]],
) -> list[AggregationItem]:
    """Keep questions with at least one EM-correct candidate, marking all of
    them correct."""
    items = []
    for qid in sorted(pipeline_outputs):
        answers = gold.get(qid) or ()
        if not answers:
            continue
        cands = tuple(
            (features, exact_match(surface, answers))
            for surface, features in pipeline_outputs[qid]
        )
        if any(correct for _, correct in cands):
            items.append(AggregationItem(qid, cands))
    return items


def aggregation_loss(model: AggregationModel, item: AggregationItem) -> float:
    """-log of the correct-candidate mass under softmax of aggregated scores."""
    scores = [model.score(f) for f, _ in item.candidates]
    correct = [s for s, (_, ok) in zip(scores, item.candidates) if ok]
    return log_sum_exp(scores) - log_sum_exp(correct)


def aggregation_loss_and_grad(
    X: np.ndarray, correct: np.ndarray, w: np.ndarray, b: float
) -> tuple[float, np.ndarray, float]:
    """Loss and gradient of one item for the aggregation objective.

    X has one feature row per candidate; correct is a boolean mask with at
    least one True. The bias gradient is identically 0 (it cancels in the
    softmax) and is returned for interface symmetry.
    """
    z = X @ w + b
    m = z.max()
    exp = np.exp(z - m)
    p = exp / exp.sum()
    mass = float(p[correct].sum())
    loss = -math.log(mass)
    q = np.where(correct, p / mass, 0.0)
    dz = p - q
    return loss, X.T @ dz, float(dz.sum())


def train_aggregation(
    dataset: Sequence[AggregationItem],
    config: FeatureConfig,
    hyper: TrainHyper = TrainHyper(),
) -> tuple[AggregationModel, tuple[float, ...]]:
    """Full-batch gradient descent on the mean aggregation loss.

    The objective is convex in (w, b); the trace records the mean loss at
    the start of each epoch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    names = config.feature_names
    mats = [
        (
            np.stack([f.select(names) for f, _ in item.candidates]),
            np.array([ok for _, ok in item.candidates], dtype=bool),
        )
        for item in dataset
    ]
    w = np.zeros(len(names), dtype=np.float64)
    b = 0.0
    trace = []
    for _ in range(hyper.epochs):
        total = 0.0
        grad_w = np.zeros_like(w)
        grad_b = 0.0
        for X, correct in mats:
            loss, gw, gb = aggregation_loss_and_grad(X, correct, w, b)
            total += loss
            grad_w += gw
            grad_b += gb
        trace.append(total / len(mats))
        w = w - hyper.learning_rate * grad_w / len(mats)
        b = b - hyper.learning_rate * grad_b / len(mats)
    return AggregationModel(names, tuple(w), b), tuple(trace)


def aggregate_and_select(
    model: AggregationModel, candidates: Sequence[FusionCandidate]
) -> tuple[FusionCandidate, float]:
    """Best candidate under the aggregated score, and that score (with bias).

    Ties break by (score desc, passage_id asc, start asc, end asc).
    """
    if not candidates:
        raise ValueError("empty candidates")
    best = min(
        candidates,
        key=lambda c: (-model.score(c.features), *c.sort_key),
    )
    return best, model.score(best.features)


def build_bd_dataset(
    agg_predictions: Mapping[str, tuple[str, float]],
    greedy_answers: Mapping[str, tuple[str, float]],
    gold: Mapping[str, Sequence[str]],
) -> list[BDItem]:
    """Keep questions where exactly one of the two predictions is correct;
    the target is 1 iff the abstractive one is."""
    items = []
    for qid in sorted(agg_predictions):
        if qid not in greedy_answers:
            continue
        answers = gold.get(qid) or ()
        if not answers:
            continue
        ext_answer, s_agg = agg_predictions[qid]
        abs_answer, s_g_star = greedy_answers[qid]
        ext_ok = exact_match(ext_answer, answers)
        abs_ok = exact_match(abs_answer, answers)
        if ext_ok == abs_ok:
            continue
        items.append(BDItem(qid, s_agg, s_g_star, int(abs_ok)))
    return items


def bd_loss_and_grad(
    X: np.ndarray, targets: np.ndarray, w: np.ndarray, b: float
) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy from logits, with its gradient."""
    logits = X @ w + b
    # softplus(l) - t*l, computed overflow-safe
    loss = float(np.mean(np.maximum(logits, 0.0) - targets * logits + np.log1p(np.exp(-np.abs(logits)))))
    sig = 1.0 / (1.0 + np.exp(-logits))
    dz = (sig - targets) / len(targets)
    return loss, X.T @ dz, float(dz.sum())


def train_binary_decider(
    dataset: Sequence[BDItem], hyper: TrainHyper = TrainHyper()
) -> tuple[BinaryDecider, tuple[float, ...]]:
    """Full-batch gradient descent on mean binary cross-entropy."""
    if not dataset:
        raise ValueError("empty dataset")
    X = np.array([[item.s_agg, item.s_g_star] for item in dataset], dtype=np.float64)
    t = np.array([item.target for item in dataset], dtype=np.float64)
    w = np.zeros(2, dtype=np.float64)
    b = 0.0
    trace = []
    for _ in range(hyper.epochs):
        loss, gw, gb = bd_loss_and_grad(X, t, w, b)
        trace.append(loss)
        w = w - hyper.learning_rate * gw
        b = b - hyper.learning_rate * gb
    return BinaryDecider((float(w[0]), float(w[1])), b), tuple(trace)


def decide(decider: BinaryDecider, s_agg: float, s_g_star: float) -> str:
    """Choose the answer source; exact ties go to the extractive side."""
    return SOURCE_ABSTRACTIVE if decider.logit(s_agg, s_g_star) > 0.0 else SOURCE_EXTRACTIVE


def posterior_average_ensemble(dists: Sequence[LogDist]) -> object:
    """Key with the highest arithmetic-mean probability across members.

    All members must share one key set; ties go to the smallest key.
    """
    if len(dists) < 2:
        raise ValueError("need at least two distributions")
    keys = dists[0].keys()
    key_set = set(keys)
    for d in dists[1:]:
        if set(d.keys()) != key_set:
            raise ValueError("mismatched key sets")
    means = {
        key: math.fsum(d.prob(key) for d in dists) / len(dists) for key in keys
    }
    return min(means.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def run_fusion_pipeline(
    question: Question,
    mode: str,
    candidates: Sequence[FusionCandidate],
    generative: GenerativeOutput | None = None,
    agg_model: AggregationModel | None = None,
    decider: BinaryDecider | None = None,
) -> Prediction:
    """Produce the final answer for one question under the requested mode.

    naive picks the candidate surface with the best generative
    log-probability; aggr picks the best aggregated span; aggr+bd further
    chooses between that span and the greedy generative answer.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not candidates:
        raise ValueError(f"question {question.id!r}: missing component output: candidates")

    if mode == MODE_NAIVE:
        if generative is None:
            raise ValueError(f"question {question.id!r}: missing component output: generative")
        surfaces = []
        for cand in candidates:
            if cand.span.surface not in surfaces:
                surfaces.append(cand.span.surface)
        scored = []
        for surface in surfaces:
            if surface not in generative.reranked:
                raise ValueError(
                    f"question {question.id!r}: missing component output: generative "
                    f"log-probability for {surface!r}"
                )
            scored.append((surface, generative.reranked[surface]))
        answer, score = min(scored, key=lambda kv: (-kv[1], kv[0]))
        return Prediction(question.id, answer, SOURCE_EXTRACTIVE, score)

    if agg_model is None:
        raise ValueError(f"question {question.id!r}: missing component output: aggregation model")
    best, s_agg = aggregate_and_select(agg_model, candidates)
    if mode == MODE_AGGR:
        return Prediction(question.id, best.span.surface, SOURCE_EXTRACTIVE, s_agg)

    if generative is None:
        raise ValueError(f"question {question.id!r}: missing component output: generative")
    if decider is None:
        raise ValueError(f"question {question.id!r}: missing component output: binary decider")
    s_g_star = generative.greedy_log_prob
    if decide(decider, s_agg, s_g_star) == SOURCE_ABSTRACTIVE:
        return Prediction(question.id, generative.greedy_answer, SOURCE_ABSTRACTIVE, s_g_star)
    return Prediction(question.id, best.span.surface, SOURCE_EXTRACTIVE, s_agg)
