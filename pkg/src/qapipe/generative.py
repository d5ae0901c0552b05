"""Generative reader boundary: answer-conditional log-probability scoring
and a greedy free-form answer behind a pluggable scorer.

Two deterministic scorers are bundled: TableScorer replays explicit fixture
scores, and UnigramScorer builds an add-one-smoothed unigram model over the
input passages. Real-model outputs can be injected offline through the same
GenerativeOutput record.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from .core import Passage, Question, ScoredList
from .matching import tokenize
from .reader import AnswerSpan

_SLACK = 1e-12


class GenerativeScorer(Protocol):
    def answer_log_prob(
        self, question: Question, passages: Sequence[Passage], answer: str
    ) -> float: ...

    def generate(
        self, question: Question, passages: Sequence[Passage]
    ) -> tuple[str, float]: ...


@dataclass(frozen=True)
class GenerativeOutput:
    """Greedy answer plus reranked span log-probabilities for one question."""

    question_id: str
    greedy_answer: str
    greedy_log_prob: float
    reranked: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "reranked", dict(self.reranked))
        if self.greedy_log_prob > _SLACK:
            raise ValueError("greedy_log_prob must be <= 0")
        for answer, lp in self.reranked.items():
            if lp > _SLACK:
                raise ValueError(f"log probability above 0 for {answer!r}")


class TableScorer:
    """Replays an explicit (question, answer) -> log-probability table."""

    def __init__(
        self,
        table: Mapping[str, Mapping[str, float]],
        greedy: Mapping[str, str],
    ):
        self.table = {qid: dict(answers) for qid, answers in table.items()}
        self.greedy_by_qid = dict(greedy)
        for qid, answers in self.table.items():
            for answer, lp in answers.items():
                if lp > _SLACK:
                    raise ValueError(f"log probability above 0 for {qid!r}/{answer!r}")
        for qid, answer in self.greedy_by_qid.items():
            if answer not in self.table.get(qid, {}):
                raise ValueError(f"greedy answer for {qid!r} missing from its table")

    def answer_log_prob(self, question, passages, answer):
        try:
            return self.table[question.id][answer]
        except KeyError:
            raise LookupError(
                f"question {question.id!r}: no table entry for answer {answer!r}"
            ) from None

    def generate(self, question, passages):
        if question.id not in self.greedy_by_qid:
            raise LookupError(f"question {question.id!r}: no greedy table entry")
        answer = self.greedy_by_qid[question.id]
        return answer, self.table[question.id][answer]


class UnigramScorer:
    """Add-one-smoothed unigram model over the concatenated input passages.

    Answer log-probability is the sum of per-token log-probabilities with an
    out-of-vocabulary bucket; the greedy answer is the single most frequent
    passage token.
    """

    def _model(self, passages: Sequence[Passage]) -> tuple[Counter, int, int]:
        if not passages:
            raise ValueError("empty passages")
        counts: Counter[str] = Counter()
        for p in passages:
            counts.update(tokenize(p.context).tokens)
        total = sum(counts.values())
        # +1 reserves smoothed mass for the out-of-vocabulary bucket, so the
        # vocabulary plus that bucket sums to exactly 1.
        denom = total + len(counts) + 1
        return counts, total, denom

    def token_log_probs(self, passages: Sequence[Passage]) -> dict[str, float]:
        counts, _, denom = self._model(passages)
        return {tok: math.log((c + 1) / denom) for tok, c in sorted(counts.items())}

    def oov_log_prob(self, passages: Sequence[Passage]) -> float:
        _, _, denom = self._model(passages)
        return math.log(1.0 / denom)

    def answer_log_prob(self, question, passages, answer):
        counts, _, denom = self._model(passages)
        total = 0.0
        for tok in tokenize(answer).tokens:
            total += math.log((counts.get(tok, 0) + 1) / denom)
        return total

    def generate(self, question, passages):
        counts, _, denom = self._model(passages)
        tok, c = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return tok, math.log((c + 1) / denom)


def rerank_answers(
    scorer: GenerativeScorer,
    question: Question,
    passages: Sequence[Passage],
    spans: Sequence[AnswerSpan | str],
    length_normalize: bool = False,
) -> dict[str, float]:
    """Log-probability of each distinct candidate surface under the scorer.

    Raw log-probabilities by default; length_normalize divides by the answer
    token count, which penalizes short answers less.
    """
    if not spans:
        raise ValueError("empty spans")
    surfaces: list[str] = []
    for span in spans:
        surface = span if isinstance(span, str) else span.surface
        if surface not in surfaces:
            surfaces.append(surface)
    out = {}
    for surface in surfaces:
        try:
            lp = float(scorer.answer_log_prob(question, passages, surface))
        except Exception as exc:
            raise RuntimeError(
                f"generative scorer failed on question {question.id!r}: {exc}"
            ) from exc
        if length_normalize:
            lp /= max(1, len(tokenize(surface).tokens))
        out[surface] = lp
    return out


def greedy_answer(
    scorer: GenerativeScorer, question: Question, passages: Sequence[Passage]
) -> tuple[str, float]:
    """The scorer's deterministic highest-probability answer."""
    if not passages:
        raise ValueError("empty passages")
    try:
        answer, log_prob = scorer.generate(question, passages)
    except Exception as exc:
        raise RuntimeError(
            f"generative scorer failed on question {question.id!r}: {exc}"
        ) from exc
    return answer, float(log_prob)


def assemble_reader_input(
    reranked: ScoredList, v2: int, corpus: Mapping[str, Passage]
) -> list[Passage]:
    """Top-v2 reranked passages in rank order."""
    if v2 < 1:
        raise ValueError("v2 must be >= 1")
    return [corpus[pid] for pid in reranked.top(v2).ids()]
