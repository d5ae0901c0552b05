"""Scoring, fusion, and evaluation engine for retrieve-rerank-read QA
pipelines, with pluggable scorers in place of neural encoders."""

from .core import (
    LogDist,
    Passage,
    QAExample,
    Question,
    ScoredList,
    log_sum_exp,
    softmax_over_set,
    top_k,
)
from .matching import (
    FilterReport,
    MatchSpan,
    TokenSeq,
    annotate_example,
    brute_force_best,
    exact_match_spans,
    f1_overlap,
    filter_for_extractive,
    filter_for_reranker,
    length_limit,
    soft_match_best,
    tokenize,
)
from .reader import (
    AnswerSpan,
    Factorization,
    ReaderScores,
    SpanAnnotation,
    decode_top_m,
    loss_independent,
    loss_joint_marginalized,
    normalize_reader_scores,
    reader_passage_ordering,
    verify_inter_intra_identity,
)
from .metrics import (
    Prediction,
    accuracy_at_k,
    em_score,
    exact_match,
    has_answer,
    normalize_answer,
    overlap_report,
)

__version__ = "0.1.0"
