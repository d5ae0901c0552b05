"""Extractive reader mathematics: pooled span distributions, span decoding
under configurable factorizations, and the marginalized training losses.

Score tensors arrive through ReaderScores (from files or from the bundled
lexical scorer); the four distributions are normalized jointly across every
passage of a question's batch, and span probabilities are the unnormalized
product of whichever factors are active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import LogDist, Passage, Question, ScoredList, log_sum_exp, softmax_over_set
from .matching import tokenize

FACTOR_INDEPENDENT = "I"
FACTOR_JOINT = "J"
FACTOR_PASSAGE = "C"
_ALL_FACTORS = frozenset({FACTOR_INDEPENDENT, FACTOR_JOINT, FACTOR_PASSAGE})

LOSS_COMPONENTS = ("start", "end", "joint", "passage")


@dataclass(frozen=True)
class Factorization:
    """Active factors of the span probability product.

    I combines the independent start and end distributions, J the joint
    boundary distribution, and C the passage distribution.
    """

    flags: frozenset[str]

    def __post_init__(self):
        flags = frozenset(self.flags)
        if not flags or not flags <= _ALL_FACTORS:
            raise ValueError(f"flags must be a non-empty subset of {{I, J, C}}: {self.flags!r}")
        object.__setattr__(self, "flags", flags)

    @classmethod
    def parse(cls, spec: str) -> "Factorization":
        return cls(frozenset(spec.upper().replace("+", "").replace(",", "")))

    def __str__(self) -> str:
        return "".join(f for f in "IJC" if f in self.flags)


FULL_FACTORIZATION = Factorization(_ALL_FACTORS)


@dataclass(frozen=True)
class ReaderScores:
    """Per-passage score tensors for span decoding.

    s_joint and span_mask are banded: column d of row s addresses the span
    (s, s + d), so only spans shorter than the band width are representable.
    The mask marks decodable spans and must be False outside the passage.
    """

    passage_id: str
    s_start: np.ndarray
    s_end: np.ndarray
    s_joint: np.ndarray
    s_passage: float
    span_mask: np.ndarray

    def __post_init__(self):
        s_start = np.asarray(self.s_start, dtype=np.float64)
        s_end = np.asarray(self.s_end, dtype=np.float64)
        s_joint = np.asarray(self.s_joint, dtype=np.float64)
        mask = np.asarray(self.span_mask, dtype=bool)
        L = s_start.shape[0]
        if L < 1 or s_start.ndim != 1 or s_end.shape != (L,):
            raise ValueError("s_start and s_end must be equal-length vectors")
        if s_joint.ndim != 2 or s_joint.shape[0] != L or mask.shape != s_joint.shape:
            raise ValueError("s_joint and span_mask must be (L, max_span_len) bands")
        width = s_joint.shape[1]
        if width < 1:
            raise ValueError("band width must be >= 1")
        ends = np.arange(L)[:, None] + np.arange(width)[None, :]
        if bool(mask[ends >= L].any()):
            raise ValueError("span_mask marks spans beyond the passage end")
        for name, arr in (("s_start", s_start), ("s_end", s_end), ("s_joint", s_joint)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite scores")
        if not math.isfinite(self.s_passage):
            raise ValueError("s_passage must be finite")
        object.__setattr__(self, "s_start", s_start)
        object.__setattr__(self, "s_end", s_end)
        object.__setattr__(self, "s_joint", s_joint)
        object.__setattr__(self, "span_mask", mask)
        object.__setattr__(self, "s_passage", float(self.s_passage))

    @property
    def length(self) -> int:
        return self.s_start.shape[0]

    @property
    def max_span_len(self) -> int:
        return self.s_joint.shape[1]

    def valid_spans(self) -> list[tuple[int, int]]:
        """Mask-valid (start, end) pairs in (start, end) order."""
        return [(int(s), int(s + d)) for s, d in np.argwhere(self.span_mask)]


@dataclass(frozen=True)
class SpanAnnotation:
    """A supervision target span inside one passage of a batch."""

    passage_id: str
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError("invalid annotation bounds")


@dataclass(frozen=True)
class AnswerSpan:
    """A decoded candidate answer with its per-component log-probabilities.

    log_p_e is the sum of the log-probabilities of the factors that were
    active during decoding (all four when the full factorization is used).
    """

    passage_id: str
    start: int
    end: int
    surface: str
    log_p_start: float
    log_p_end: float
    log_p_joint: float
    log_p_passage: float
    log_p_e: float


@dataclass(frozen=True)
class ReaderDistributions:
    """The four distributions pooled over every passage of a batch."""

    start: LogDist
    end: LogDist
    joint: LogDist
    passage: LogDist

    def span_score(self, pid: str, start: int, end: int, factorization: Factorization) -> float:
        score = 0.0
        if FACTOR_INDEPENDENT in factorization.flags:
            score += self.start.log_prob((pid, start)) + self.end.log_prob((pid, end))
        if FACTOR_JOINT in factorization.flags:
            score += self.joint.log_prob((pid, start, end))
        if FACTOR_PASSAGE in factorization.flags:
            score += self.passage.log_prob(pid)
        return score


def _check_batch(batch: Sequence[ReaderScores]) -> None:
    if not batch:
        raise ValueError("empty batch")
    seen = set()
    for rs in batch:
        if rs.passage_id in seen:
            raise ValueError(f"duplicate passage {rs.passage_id!r} in batch")
        seen.add(rs.passage_id)


def normalize_reader_scores(batch: Sequence[ReaderScores]) -> ReaderDistributions:
    """Pool the start/end/joint/passage scores of all passages and normalize
    each family into one distribution.

    Start and end distributions run over the mask-valid start and end
    positions, the joint distribution over the mask-valid spans, and the
    passage distribution over the whole batch.
    """
    _check_batch(batch)
    start_scores: dict[tuple[str, int], float] = {}
    end_scores: dict[tuple[str, int], float] = {}
    joint_scores: dict[tuple[str, int, int], float] = {}
    passage_scores: dict[str, float] = {}
    for rs in batch:
        passage_scores[rs.passage_id] = rs.s_passage
        if not rs.span_mask.any():
            continue
        starts = np.flatnonzero(rs.span_mask.any(axis=1))
        for s in starts:
            start_scores[(rs.passage_id, int(s))] = float(rs.s_start[s])
        for s, d in np.argwhere(rs.span_mask):
            e = int(s + d)
            end_scores[(rs.passage_id, e)] = float(rs.s_end[e])
            joint_scores[(rs.passage_id, int(s), e)] = float(rs.s_joint[s, d])
    if not joint_scores:
        raise ValueError("no decodable span")
    return ReaderDistributions(
        start=softmax_over_set(start_scores),
        end=softmax_over_set(end_scores),
        joint=softmax_over_set(joint_scores),
        passage=softmax_over_set(passage_scores),
    )


def _surface_tokens(corpus: Mapping[str, Passage], batch: Sequence[ReaderScores]):
    surfaces = {}
    for rs in batch:
        passage = corpus.get(rs.passage_id)
        if passage is None:
            raise ValueError(f"passage {rs.passage_id!r} not in corpus")
        toks = tokenize(passage.context)
        if len(toks) != rs.length:
            raise ValueError(
                f"passage {rs.passage_id!r}: score length {rs.length} does not "
                f"match its {len(toks)} context tokens"
            )
        surfaces[rs.passage_id] = (passage.context, toks)
    return surfaces


def decode_top_m(
    batch: Sequence[ReaderScores],
    m: int,
    factorization: Factorization = FULL_FACTORIZATION,
    *,
    corpus: Mapping[str, Passage],
    dists: ReaderDistributions | None = None,
) -> list[AnswerSpan]:
    """Top-m mask-valid spans under the active probability product.

    Ties break by (score desc, passage_id asc, start asc, end asc); the
    product is left unnormalized.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if dists is None:
        dists = normalize_reader_scores(batch)
    surfaces = _surface_tokens(corpus, batch)
    scored: list[tuple[float, str, int, int]] = []
    for rs in batch:
        for s, e in rs.valid_spans():
            scored.append((dists.span_score(rs.passage_id, s, e, factorization), rs.passage_id, s, e))
    scored.sort(key=lambda item: (-item[0], item[1], item[2], item[3]))
    spans = []
    for score, pid, s, e in scored[:m]:
        context, toks = surfaces[pid]
        spans.append(
            AnswerSpan(
                passage_id=pid,
                start=s,
                end=e,
                surface=toks.surface(context, s, e),
                log_p_start=dists.start.log_prob((pid, s)),
                log_p_end=dists.end.log_prob((pid, e)),
                log_p_joint=dists.joint.log_prob((pid, s, e)),
                log_p_passage=dists.passage.log_prob(pid),
                log_p_e=score,
            )
        )
    return spans


def span_posterior(
    batch: Sequence[ReaderScores],
    factorization: Factorization = FULL_FACTORIZATION,
    *,
    dists: ReaderDistributions | None = None,
) -> LogDist:
    """Normalized distribution over all mask-valid spans, for ensembling."""
    if dists is None:
        dists = normalize_reader_scores(batch)
    scores = {}
    for rs in batch:
        for s, e in rs.valid_spans():
            scores[(rs.passage_id, s, e)] = dists.span_score(rs.passage_id, s, e, factorization)
    return softmax_over_set(scores)


def _validated_annotations(
    batch: Sequence[ReaderScores], annotations: Sequence[SpanAnnotation]
) -> list[SpanAnnotation]:
    if not annotations:
        raise ValueError("no supervision")
    by_pid = {rs.passage_id: rs for rs in batch}
    for ann in annotations:
        rs = by_pid.get(ann.passage_id)
        if rs is None:
            raise ValueError(f"annotation references unknown passage {ann.passage_id!r}")
        d = ann.end - ann.start
        if ann.end >= rs.length or d >= rs.max_span_len or not rs.span_mask[ann.start, d]:
            raise ValueError(
                f"annotation ({ann.passage_id!r}, {ann.start}, {ann.end}) is not mask-valid"
            )
    return list(annotations)


def loss_independent(
    batch: Sequence[ReaderScores],
    annotations: Sequence[SpanAnnotation],
    components: Sequence[str] = LOSS_COMPONENTS,
    *,
    dists: ReaderDistributions | None = None,
) -> float:
    """Training loss with independently marginalized components.

    Each active component contributes -log of the total probability mass its
    distribution assigns to the annotated starts / ends / spans / passages
    (each passage counted once).
    """
    _check_batch(batch)
    anns = _validated_annotations(batch, annotations)
    unknown = set(components) - set(LOSS_COMPONENTS)
    if unknown or not components:
        raise ValueError(f"components must be a non-empty subset of {LOSS_COMPONENTS}")
    if dists is None:
        dists = normalize_reader_scores(batch)
    starts = sorted({(a.passage_id, a.start) for a in anns})
    ends = sorted({(a.passage_id, a.end) for a in anns})
    spans = sorted({(a.passage_id, a.start, a.end) for a in anns})
    passages = sorted({a.passage_id for a in anns})
    loss = 0.0
    if "start" in components:
        loss -= log_sum_exp([dists.start.log_prob(k) for k in starts])
    if "end" in components:
        loss -= log_sum_exp([dists.end.log_prob(k) for k in ends])
    if "joint" in components:
        loss -= log_sum_exp([dists.joint.log_prob(k) for k in spans])
    if "passage" in components:
        loss -= log_sum_exp([dists.passage.log_prob(k) for k in passages])
    return loss


def loss_joint_marginalized(
    batch: Sequence[ReaderScores],
    annotations: Sequence[SpanAnnotation],
    factorization: Factorization = FULL_FACTORIZATION,
    *,
    dists: ReaderDistributions | None = None,
) -> float:
    """-log of the total product-probability mass over the annotated spans,
    marginalizing the components jointly (intra-passage pairs only)."""
    _check_batch(batch)
    anns = _validated_annotations(batch, annotations)
    if dists is None:
        dists = normalize_reader_scores(batch)
    spans = sorted({(a.passage_id, a.start, a.end) for a in anns})
    return -log_sum_exp([dists.span_score(pid, s, e, factorization) for pid, s, e in spans])


def verify_inter_intra_identity(
    batch: Sequence[ReaderScores],
    annotations: Sequence[SpanAnnotation],
    *,
    dists: ReaderDistributions | None = None,
) -> tuple[float, float]:
    """Start/end loss terms computed two ways, for verification.

    The left side sums the two independently marginalized terms; the right
    side marginalizes over every (start, end) combination explicitly. The
    two must agree to floating-point accuracy.
    """
    _check_batch(batch)
    anns = _validated_annotations(batch, annotations)
    if dists is None:
        dists = normalize_reader_scores(batch)
    start_lps = [dists.start.log_prob(k) for k in sorted({(a.passage_id, a.start) for a in anns})]
    end_lps = [dists.end.log_prob(k) for k in sorted({(a.passage_id, a.end) for a in anns})]
    lhs = -log_sum_exp(start_lps) - log_sum_exp(end_lps)
    rhs = -log_sum_exp([ls + le for ls in start_lps for le in end_lps])
    return lhs, rhs


def reader_passage_ordering(batch: Sequence[ReaderScores], question_id: str = "") -> ScoredList:
    """Passages ordered by raw passage score, as a reader-only reranking."""
    _check_batch(batch)
    return ScoredList.from_scores(question_id, {rs.passage_id: rs.s_passage for rs in batch})


def band_mask(length: int, max_span_len: int) -> np.ndarray:
    """Mask admitting every in-passage span shorter than max_span_len."""
    d = np.arange(max_span_len)[None, :]
    s = np.arange(length)[:, None]
    return (s + d) < length


@dataclass
class LexicalReaderScorer:
    """Deterministic token-feature scorer producing reader tensors.

    Per-token features are question-token overlap, IDF, and relative
    position; each score head is a fixed linear combination, so the tensors
    are a pure function of the inputs. This stands in for a neural reader
    behind the same ReaderScores interface.
    """

    idf: Mapping[str, float]
    max_span_len: int = 30
    start_weights: tuple[float, float, float] = (3.0, 0.2, -0.4)
    end_weights: tuple[float, float, float] = (3.0, 0.2, 0.4)
    length_penalty: float = 0.25
    passage_scale: float = 6.0

    def score_passage(self, question: Question, passage: Passage) -> ReaderScores:
        toks = tokenize(passage.context)
        if not toks.tokens:
            raise ValueError(f"passage {passage.id!r} has no tokens")
        q_tokens = set(tokenize(question.text).tokens)
        L = len(toks)
        overlap = np.array([1.0 if t in q_tokens else 0.0 for t in toks.tokens])
        idf = np.array([self.idf.get(t, 1.0) for t in toks.tokens])
        pos = np.arange(L) / L
        feats = np.stack([overlap, idf, pos], axis=1)
        s_start = feats @ np.asarray(self.start_weights)
        s_end = feats @ np.asarray(self.end_weights)
        width = min(self.max_span_len, L)
        mask = band_mask(L, width)
        d = np.arange(width)[None, :]
        ends = np.minimum(np.arange(L)[:, None] + d, L - 1)
        s_joint = 0.5 * (s_start[:, None] + s_end[ends]) - self.length_penalty * d
        s_passage = self.passage_scale * float(overlap.mean())
        return ReaderScores(
            passage_id=passage.id,
            s_start=s_start,
            s_end=s_end,
            s_joint=s_joint,
            s_passage=s_passage,
            span_mask=mask,
        )

    def score_batch(self, question: Question, passages: Iterable[Passage]) -> list[ReaderScores]:
        return [self.score_passage(question, p) for p in passages]
