"""Shared domain types and numerically stable log-domain utilities.

Everything downstream stores and combines probabilities in log domain;
linear-domain values appear only at serialization boundaries. All types are
immutable after construction and all operations are pure functions, so they
are safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

Key = Hashable


@dataclass(frozen=True)
class Question:
    """A question with its annotated answers (empty for unlabeled inference)."""

    id: str
    text: str
    gold_answers: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"question {self.id!r}: text must be non-empty")
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))


@dataclass(frozen=True)
class Passage:
    """A retrieval unit: short context snippet plus its (possibly empty) title."""

    id: str
    title: str
    context: str

    def __post_init__(self):
        if not self.context:
            raise ValueError(f"passage {self.id!r}: context must be non-empty")


@dataclass(frozen=True)
class QAExample:
    """A question together with its annotated evidence passage, when known."""

    question: Question
    golden_passage_id: str | None = None


@dataclass(frozen=True)
class ScoredList:
    """A question's ranked passages with raw scores.

    Entries are kept sorted by score descending with ties broken by
    passage id ascending, which makes every consumer bit-reproducible.
    """

    question_id: str
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((pid, float(score)) for pid, score in self.entries)
        object.__setattr__(self, "entries", entries)
        seen: set[str] = set()
        for pid, score in entries:
            if not math.isfinite(score):
                raise ValueError(f"non-finite score for passage {pid!r}")
            if pid in seen:
                raise ValueError(f"duplicate passage id {pid!r}")
            seen.add(pid)
        for (pid_a, sc_a), (pid_b, sc_b) in zip(entries, entries[1:]):
            if sc_a < sc_b or (sc_a == sc_b and pid_a >= pid_b):
                raise ValueError(
                    "entries must be sorted by (score desc, passage_id asc)"
                )

    @classmethod
    def from_scores(
        cls, question_id: str, scores: Mapping[str, float] | Iterable[tuple[str, float]]
    ) -> "ScoredList":
        pairs = scores.items() if isinstance(scores, Mapping) else scores
        ordered = sorted(pairs, key=lambda kv: (-kv[1], kv[0]))
        return cls(question_id, tuple(ordered))

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> tuple[str, ...]:
        return tuple(pid for pid, _ in self.entries)

    def top(self, k: int) -> "ScoredList":
        return ScoredList(self.question_id, self.entries[:k])

    def score_of(self, passage_id: str) -> float:
        for pid, score in self.entries:
            if pid == passage_id:
                return score
        raise KeyError(passage_id)


@dataclass(frozen=True)
class LogDist:
    """A normalized distribution stored as (key, log probability) pairs.

    Construction checks that the log probabilities exponentiate to 1 within
    1e-9 and never exceed 0 beyond 1e-12 slack. Items are kept in key order
    so equal distributions compare equal regardless of input order.
    """

    items: tuple[tuple[Key, float], ...]
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        items = tuple((key, float(lp)) for key, lp in self.items)
        if not items:
            raise ValueError("empty domain")
        index = {}
        for key, lp in items:
            if key in index:
                raise ValueError(f"duplicate key {key!r}")
            if not math.isfinite(lp) and lp != float("-inf"):
                raise ValueError(f"invalid log probability for {key!r}: {lp}")
            if lp > 1e-12:
                raise ValueError(f"log probability above 0 for {key!r}: {lp}")
            index[key] = lp
        total = math.fsum(math.exp(lp) for _, lp in items)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.items)

    def keys(self) -> tuple[Key, ...]:
        return tuple(key for key, _ in self.items)

    def log_prob(self, key: Key) -> float:
        return self._index[key]

    def prob(self, key: Key) -> float:
        return math.exp(self._index[key])

    def as_dict(self) -> dict[Key, float]:
        return dict(self.items)

    def argmax(self) -> Key:
        """Key with the highest probability; ties go to the smallest key."""
        return min(self.items, key=lambda kv: (-kv[1], kv[0]))[0]


def log_sum_exp(values: Sequence[float]) -> float:
    """log(sum(exp(v))) computed shift-stable against overflow."""
    if len(values) == 0:
        raise ValueError("empty values")
    m = max(values)
    if not math.isfinite(m):
        raise ValueError("non-finite value")
    if len(values) == 1:
        return float(values[0])
    acc = math.fsum(math.exp(v - m) for v in values)
    return m + math.log(acc)


def softmax_over_set(
    scores: Mapping[Key, float] | Iterable[tuple[Key, float]]
) -> LogDist:
    """Normalize a score map into a LogDist over exactly its keys.

    The result is order-independent and invariant to adding a constant to
    every score.
    """
    pairs = list(scores.items()) if isinstance(scores, Mapping) else list(scores)
    if not pairs:
        raise ValueError("empty domain")
    for key, value in pairs:
        if not math.isfinite(value):
            raise ValueError(f"non-finite score for {key!r}")
    lse = log_sum_exp([value for _, value in pairs])
    return LogDist(tuple((key, value - lse) for key, value in sorted(pairs)))


def top_k(entries: Iterable[tuple[Key, float]], k: int) -> list[tuple[Key, float]]:
    """The k highest-scoring entries, sorted by (score desc, key asc).

    Returns the whole sorted list when fewer than k entries exist.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    return sorted(entries, key=lambda kv: (-kv[1], kv[0]))[:k]
