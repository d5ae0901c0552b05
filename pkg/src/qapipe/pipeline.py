"""End-to-end orchestration: per-question inference over the full
retrieve, rerank, read, fuse chain.

Each stage accepts precomputed stage files when supplied and falls back to
the bundled desk-scale scorers otherwise. Per-question work is pure, so it
may fan out over a thread pool; results merge in question-id order, making
output independent of the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import Passage, QAExample, ScoredList
from .fusion import (
    MODES,
    AggregationModel,
    BinaryDecider,
    FeatureConfig,
    FusionCandidate,
    FusionFeatures,
    run_fusion_pipeline,
)
from .generative import (
    GenerativeOutput,
    GenerativeScorer,
    UnigramScorer,
    assemble_reader_input,
    greedy_answer,
    rerank_answers,
)
from .metrics import Prediction
from .ranking import (
    LexicalPairFeatures,
    LinearReranker,
    TfidfScorer,
    passage_probs,
    rescore,
    retrieve,
)
from .reader import (
    FULL_FACTORIZATION,
    Factorization,
    LexicalReaderScorer,
    decode_top_m,
    normalize_reader_scores,
)

# Sensible linear-reranker weights for running without a trained model:
# overlap count, idf-weighted overlap, reciprocal retrieval rank, length ratio.
DEFAULT_RERANK_WEIGHTS = (0.5, 0.25, 2.0, 0.0)


@dataclass(frozen=True)
class RunConfig:
    """Pipeline-wide sizes, seeds, and fusion configuration.

    v defaults to 24 with the reranker in play; without one the reader would
    consume the retriever run directly and larger v is appropriate.
    """

    k: int = 200
    n: int = 24
    v: int = 24
    v2: int = 25
    m: int = 25
    max_span_len: int = 30
    seed: int = 0
    mode: str = "aggr"
    readers: str = "e,g"
    rankers: str = "r,rr"
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("k", "n", "v", "v2", "m", "max_span_len", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.v > self.k or self.v2 > self.k:
            raise ValueError("v and v2 must not exceed k")
        self.feature_config()  # validates readers/rankers

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig.parse(self.readers, self.rankers)


@dataclass
class PipelineResources:
    """Stage inputs and models; unset stages fall back to desk scorers."""

    corpus: Mapping[str, Passage]
    config: RunConfig
    runs: Mapping[str, ScoredList] | None = None
    rerank_runs: Mapping[str, ScoredList] | None = None
    reader_scores: Mapping[str, Sequence] | None = None
    generative: Mapping[str, GenerativeOutput] | None = None
    agg_model: AggregationModel | None = None
    bd_model: BinaryDecider | None = None
    retriever: TfidfScorer | None = None
    reranker: LinearReranker | None = None
    reader_scorer: LexicalReaderScorer | None = None
    generative_scorer: GenerativeScorer | None = None
    factorization: Factorization = FULL_FACTORIZATION

    def __post_init__(self):
        needs_retrieval = self.runs is None or self.rerank_runs is None
        if self.retriever is None and needs_retrieval:
            self.retriever = TfidfScorer(self.corpus)
        if self.reranker is None and self.rerank_runs is None:
            feats = LexicalPairFeatures(
                idf=self.retriever.idf if self.retriever else {}, runs=None
            )
            self.reranker = LinearReranker(feats, weights=list(DEFAULT_RERANK_WEIGHTS))
        if self.reader_scorer is None and self.reader_scores is None:
            idf = self.retriever.idf if self.retriever else {}
            self.reader_scorer = LexicalReaderScorer(
                idf=idf, max_span_len=self.config.max_span_len
            )
        if self.generative_scorer is None and self.generative is None:
            self.generative_scorer = UnigramScorer()


@dataclass(frozen=True)
class QuestionResult:
    """Everything the fusion stage produced for one question."""

    prediction: Prediction
    candidates: tuple[FusionCandidate, ...]
    generative: GenerativeOutput
    run: ScoredList
    rerank_run: ScoredList


def _stage(table, qid: str, stage: str):
    if table is None:
        return None
    if qid not in table:
        raise ValueError(f"question {qid!r}: missing component output: {stage}")
    return table[qid]


def answer_question(example: QAExample, res: PipelineResources) -> QuestionResult:
    """Run the full chain for one question."""
    question = example.question
    cfg = res.config

    run = _stage(res.runs, question.id, "retrieval run")
    if run is None:
        run = retrieve(question, res.corpus, cfg.k, res.retriever)

    rerank_run = _stage(res.rerank_runs, question.id, "rerank run")
    if rerank_run is None:
        rerank_run = rescore(question, run, res.reranker, res.corpus)

    batch = _stage(res.reader_scores, question.id, "reader scores")
    if batch is None:
        passages = [res.corpus[pid] for pid in rerank_run.top(cfg.v).ids()]
        batch = res.reader_scorer.score_batch(question, passages)

    dists = normalize_reader_scores(batch)
    spans = decode_top_m(
        batch, cfg.m, res.factorization, corpus=res.corpus, dists=dists
    )

    generative = _stage(res.generative, question.id, "generative")
    if generative is None:
        gen_passages = assemble_reader_input(rerank_run, cfg.v2, res.corpus)
        reranked = rerank_answers(res.generative_scorer, question, gen_passages, spans)
        greedy, greedy_lp = greedy_answer(res.generative_scorer, question, gen_passages)
        generative = GenerativeOutput(question.id, greedy, greedy_lp, reranked)

    p_r = passage_probs(run)
    p_rr = passage_probs(rerank_run)
    candidates = []
    for span in spans:
        if span.surface not in generative.reranked:
            raise ValueError(
                f"question {question.id!r}: missing component output: generative "
                f"log-probability for {span.surface!r}"
            )
        features = FusionFeatures.from_span(
            span,
            log_p_g=generative.reranked[span.surface],
            log_p_r=p_r.log_prob(span.passage_id),
            log_p_rr=p_rr.log_prob(span.passage_id),
        )
        candidates.append(FusionCandidate(span, features))

    prediction = run_fusion_pipeline(
        question,
        cfg.mode,
        candidates,
        generative=generative,
        agg_model=res.agg_model,
        decider=res.bd_model,
    )
    return QuestionResult(prediction, tuple(candidates), generative, run, rerank_run)


def predict(
    examples: Sequence[QAExample], res: PipelineResources, jobs: int | None = None
) -> list[QuestionResult]:
    """Answer every question; results come back sorted by question id."""
    jobs = res.config.jobs if jobs is None else jobs
    ordered = sorted(examples, key=lambda ex: ex.question.id)
    if jobs <= 1:
        results = [answer_question(ex, res) for ex in ordered]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda ex: answer_question(ex, res), ordered))
    return sorted(results, key=lambda r: r.prediction.question_id)


def candidate_table(
    results: Sequence[QuestionResult],
) -> dict[str, list[tuple[str, FusionFeatures]]]:
    """(surface, features) rows per question, for fusion-dataset builders."""
    return {
        r.prediction.question_id: [
            (cand.span.surface, cand.features) for cand in r.candidates
        ]
        for r in results
    }
