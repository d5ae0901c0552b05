"""Answer-string normalization, exact match, Accuracy@K, and report tables."""

from __future__ import annotations

import math
import re
import string
import sys
import unicodedata
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import Passage, ScoredList
from .matching import tokenize

SOURCE_EXTRACTIVE = "extractive"
SOURCE_ABSTRACTIVE = "abstractive"
OVERLAP_SUBSETS = ("question_overlap", "answer_overlap_only", "no_overlap")

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_ASCII_PUNCT = frozenset(string.punctuation)


@dataclass(frozen=True)
class Prediction:
    question_id: str
    answer: str
    source: str
    score: float

    def __post_init__(self):
        if self.source not in (SOURCE_EXTRACTIVE, SOURCE_ABSTRACTIVE):
            raise ValueError(f"invalid source {self.source!r}")


def _is_punct(ch: str, ascii_punct: bool) -> bool:
    if ascii_punct:
        return ch in _ASCII_PUNCT
    # Unicode punctuation plus the ASCII set, which also contains a few
    # symbol-category characters ($, +, ...); the union keeps this mode a
    # strict superset of the ASCII behavior.
    return unicodedata.category(ch).startswith("P") or ch in _ASCII_PUNCT


def normalize_answer(s: str, ascii_punct: bool = False) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if not _is_punct(ch, ascii_punct))
    s = _ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def exact_match(prediction: str, gold_answers: Sequence[str], ascii_punct: bool = False) -> bool:
    """True iff the normalized prediction equals any normalized gold answer."""
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    norm = normalize_answer(prediction, ascii_punct)
    return any(norm == normalize_answer(g, ascii_punct) for g in gold_answers)


@dataclass(frozen=True)
class EMResult:
    value: float
    evaluated: int
    skipped_no_gold: int


def em_report(
    predictions: Mapping[str, str],
    gold: Mapping[str, Sequence[str]],
    ascii_punct: bool = False,
) -> EMResult:
    """Exact-match rate over all predictions with a non-empty gold set.

    Questions without gold answers are excluded and counted, not scored 0.
    """
    hits = 0
    evaluated = 0
    skipped = 0
    for qid in sorted(predictions):
        answers = gold.get(qid) or ()
        if not answers:
            skipped += 1
            continue
        evaluated += 1
        if exact_match(predictions[qid], answers, ascii_punct):
            hits += 1
    value = hits / evaluated if evaluated else 0.0
    return EMResult(value=value, evaluated=evaluated, skipped_no_gold=skipped)


def em_score(
    predictions: Mapping[str, str],
    gold: Mapping[str, Sequence[str]],
    ascii_punct: bool = False,
) -> float:
    result = em_report(predictions, gold, ascii_punct)
    if result.skipped_no_gold:
        print(
            f"warning: {result.skipped_no_gold} questions without gold answers "
            "were excluded from EM",
            file=sys.stderr,
        )
    return result.value


def has_answer(passage: Passage | str, gold_answers: Sequence[str]) -> bool:
    """True iff some gold answer occurs verbatim (token-level) in the passage.

    Containment is scanned here directly rather than through the matching
    module, so the two stay independent checks of the same contract.
    """
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    context = passage.context if isinstance(passage, Passage) else passage
    p = tokenize(context).tokens
    for answer in gold_answers:
        a = tokenize(answer).tokens
        if not a or len(a) > len(p):
            continue
        if any(p[i : i + len(a)] == a for i in range(len(p) - len(a) + 1)):
            return True
    return False


def accuracy_at_k(
    runs: Mapping[str, ScoredList],
    gold: Mapping[str, Sequence[str]],
    corpus: Mapping[str, Passage],
    ks: Sequence[int],
) -> dict[int, float]:
    """Fraction of questions whose answer appears in the top-k passages."""
    if not ks or min(ks) < 1:
        raise ValueError("ks must be positive")
    max_k = max(ks)
    qids = sorted(runs)
    hit_rank: dict[str, int | None] = {}
    for qid in qids:
        run = runs[qid]
        answers = gold.get(qid) or ()
        if not answers:
            raise ValueError(f"question {qid!r} has no gold answers")
        if len(run) < max_k:
            raise ValueError(
                f"question {qid!r}: run depth {len(run)} is below max k {max_k}"
            )
        rank = None
        for idx, pid in enumerate(run.top(max_k).ids(), start=1):
            if pid not in corpus:
                raise ValueError(f"passage {pid!r} not in corpus")
            if has_answer(corpus[pid], answers):
                rank = idx
                break
        hit_rank[qid] = rank
    out = {}
    for k in ks:
        hits = sum(1 for r in hit_rank.values() if r is not None and r <= k)
        out[k] = hits / len(qids) if qids else 0.0
    return out


def overlap_report(
    predictions: Mapping[str, str],
    gold: Mapping[str, Sequence[str]],
    labels: Mapping[str, str],
    ascii_punct: bool = False,
) -> dict[str, EMResult]:
    """EM per overlap subset plus the question-weighted total."""
    buckets: dict[str, dict[str, str]] = {name: {} for name in OVERLAP_SUBSETS}
    for qid in predictions:
        label = labels.get(qid)
        if label is None:
            raise ValueError(f"question {qid!r} has no overlap label")
        if label not in buckets:
            raise ValueError(f"question {qid!r} has unknown overlap label {label!r}")
        buckets[label][qid] = predictions[qid]
    report = {
        name: em_report(preds, gold, ascii_punct) for name, preds in buckets.items()
    }
    report["total"] = em_report(predictions, gold, ascii_punct)
    return report


def report_rows(
    em: EMResult | None = None,
    accuracy: Mapping[int, float] | None = None,
    accuracy_n: int = 0,
    overlap: Mapping[str, EMResult] | None = None,
) -> list[dict]:
    """Flatten metric results into {metric, k/subset, value, n} rows."""
    rows: list[dict] = []
    if em is not None:
        rows.append({"metric": "em", "value": em.value, "n": em.evaluated})
    if accuracy is not None:
        for k in sorted(accuracy):
            rows.append(
                {"metric": "accuracy_at_k", "k": k, "value": accuracy[k], "n": accuracy_n}
            )
    if overlap is not None:
        for subset in (*OVERLAP_SUBSETS, "total"):
            if subset in overlap:
                rows.append(
                    {
                        "metric": "em_overlap",
                        "subset": subset,
                        "value": overlap[subset].value,
                        "n": overlap[subset].evaluated,
                    }
                )
    return rows


def format_report(rows: Sequence[Mapping]) -> str:
    """Plain-text table for terminals."""
    lines = [f"{'metric':<16} {'slice':<20} {'value':>8} {'n':>6}"]
    for row in rows:
        slice_label = str(row.get("k", row.get("subset", "-")))
        value = row["value"]
        value_str = f"{value:.4f}" if isinstance(value, float) and math.isfinite(value) else str(value)
        lines.append(f"{row['metric']:<16} {slice_label:<20} {value_str:>8} {row['n']:>6}")
    return "\n".join(lines)
