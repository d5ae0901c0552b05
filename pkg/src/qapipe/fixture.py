"""Deterministic toy fixtures: a 50-question / 200-passage corpus with
constructed scorer outputs, plus small separable training sets.

The toy dataset is built so the extractive and generative scorers succeed on
overlapping but different question subsets (extractive on 60%, generative
answer-reranking on 40%, jointly 80%), which is what makes score aggregation
measurably better than either component and than posterior averaging of two
same-family scorer variants. Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import Passage, QAExample, Question, ScoredList
from .fusion import BDItem, FusionFeatures
from .generative import GenerativeOutput
from .matching import tokenize
from .pipeline import RunConfig
from .ranking import TfidfScorer, TrainingInstance, retrieve
from .reader import ReaderScores, band_mask, decode_top_m
from . import formats

N_QUESTIONS = 50
_BAND = 3

# Per-residue (i % 5) boosts for the gold and decoy spans in the extractive
# tensors, and whether the generative reranker / greedy decoder are right.
#   residues 0-2: extractive correct; 2-3: generative reranking correct;
#   3-4: greedy correct; 4: only the greedy answer is right.
# Boosts are split 0.3/0.3/0.3/0.1 over start/end/joint/passage so the
# passage component leaks only mildly onto a passage's other spans and both
# special spans always reach the fusion candidate list.
_GOLD_BOOST = {0: 8.0, 1: 8.0, 2: 8.0, 3: 6.0, 4: 4.0}
_DECOY_BOOST = {0: 4.0, 1: 4.0, 2: 4.0, 3: 8.0, 4: 8.0}
_BOOST_SPLIT = (0.3, 0.3, 0.3, 0.1)
_GEN_CORRECT = {2, 3}
_GREEDY_CORRECT = {3, 4}

EXTRACTIVE_RESIDUES = frozenset({0, 1, 2})
GENERATIVE_RESIDUES = frozenset(_GEN_CORRECT)
GREEDY_RESIDUES = frozenset(_GREEDY_CORRECT)


def toy_config() -> RunConfig:
    return RunConfig(k=8, n=4, v=4, v2=4, m=10, max_span_len=_BAND, seed=7, jobs=1)


@dataclass
class ToyFixture:
    examples: list[QAExample]
    corpus: dict[str, Passage]
    runs: dict[str, ScoredList]
    rerank_runs: dict[str, ScoredList]
    reader_scores: dict[str, list[ReaderScores]]
    reader_scores_b: dict[str, list[ReaderScores]]
    generative: dict[str, GenerativeOutput]
    labels: dict[str, str]
    config: RunConfig = field(default_factory=toy_config)

    @property
    def gold(self) -> dict[str, tuple[str, ...]]:
        return {ex.question.id: ex.question.gold_answers for ex in self.examples}

    def train_eval_split(self) -> tuple[list[str], list[str]]:
        """Odd-indexed questions tune the fusion heads, even-indexed evaluate."""
        qids = sorted(self.gold)
        return qids[1::2], qids[0::2]


def _qid(i: int) -> str:
    return f"q{i:03d}"


def _build_corpus() -> tuple[list[QAExample], dict[str, Passage]]:
    examples = []
    corpus: dict[str, Passage] = {}
    for i in range(N_QUESTIONS):
        topic, answer, decoy = f"topic{i:03d}", f"answer{i:03d}", f"decoy{i:03d}"
        question = Question(
            _qid(i), f"what is the famous secret of {topic}", (answer,)
        )
        golden_id = f"p{i:03d}g"
        passages = [
            Passage(
                golden_id,
                f"{topic} chronicle",
                f"{topic} chronicle records that the secret is {answer} according to the archive",
            ),
            Passage(
                f"p{i:03d}x",
                f"{topic} rumor",
                f"{topic} rumor claims the secret is {decoy} according to tavern gossip{i:03d}",
            ),
            Passage(
                f"p{i:03d}y",
                f"{topic} registry",
                f"{topic} registry lists trade goods and weather patterns of the region",
            ),
            Passage(
                f"p{i:03d}z",
                "almanac",
                f"general almanac entry mentioning {topic} among many other places",
            ),
        ]
        for p in passages:
            corpus[p.id] = p
        examples.append(QAExample(question, golden_id))
    return examples, corpus


def _constructed_rerank(run: ScoredList, i: int) -> ScoredList:
    """Deterministic rerank scores putting golden, decoy, then fillers on top."""
    preferred = [f"p{i:03d}g", f"p{i:03d}x", f"p{i:03d}y", f"p{i:03d}z"]
    scores = {}
    next_score = 10.0
    for pid in preferred:
        if pid in run.ids():
            scores[pid] = next_score
        next_score -= 1.0
    for pid in run.ids():
        if pid not in scores:
            scores[pid] = next_score
            next_score -= 0.125
    return ScoredList.from_scores(run.question_id, scores)


def _token_index(passage: Passage, token: str) -> int:
    toks = tokenize(passage.context).tokens
    return toks.index(token)


def _reader_batch(
    i: int,
    rerank_run: ScoredList,
    corpus: Mapping[str, Passage],
    seed_tail: tuple[int, ...],
    v: int,
) -> list[ReaderScores]:
    rng = np.random.default_rng((7, i, *seed_tail))
    residue = i % 5
    golden_id, decoy_id = f"p{i:03d}g", f"p{i:03d}x"
    batch = []
    for pid in rerank_run.top(v).ids():
        passage = corpus[pid]
        L = len(tokenize(passage.context))
        s_start = rng.normal(0.0, 0.2, L)
        s_end = rng.normal(0.0, 0.2, L)
        s_joint = rng.normal(0.0, 0.2, (L, _BAND))
        s_passage = float(rng.normal(0.0, 0.2))
        boost = None
        if pid == golden_id:
            boost = (_token_index(passage, f"answer{i:03d}"), _GOLD_BOOST[residue])
        elif pid == decoy_id:
            boost = (_token_index(passage, f"decoy{i:03d}"), _DECOY_BOOST[residue])
        if boost is not None:
            j, amount = boost
            s_start[j] += amount * _BOOST_SPLIT[0]
            s_end[j] += amount * _BOOST_SPLIT[1]
            s_joint[j, 0] += amount * _BOOST_SPLIT[2]
            s_passage += amount * _BOOST_SPLIT[3]
        batch.append(
            ReaderScores(
                passage_id=pid,
                s_start=s_start,
                s_end=s_end,
                s_joint=s_joint,
                s_passage=s_passage,
                span_mask=band_mask(L, _BAND),
            )
        )
    return batch


def _generative_output(
    i: int,
    question: Question,
    batch: list[ReaderScores],
    corpus: Mapping[str, Passage],
    m: int,
) -> GenerativeOutput:
    rng = np.random.default_rng((7, i, 3))
    residue = i % 5
    gold_surface = f"answer{i:03d}"
    decoy_surface = f"decoy{i:03d}"
    spans = decode_top_m(batch, m, corpus=corpus)
    reranked = {}
    for span in spans:
        if span.surface in reranked:
            continue
        reranked[span.surface] = -5.0 + float(rng.uniform(0.0, 0.8))
    # Score pattern per residue: 2-3 favor the gold surface outright; 0-1
    # mildly favor the decoy; 4 gives the gold a high score that the decoy
    # still edges out, so only the greedy channel can rescue it.
    fixed = {
        0: (-4.0, -3.0),
        1: (-4.0, -3.0),
        2: (-0.5, -6.5),
        3: (-0.3, -6.5),
        4: (-0.3, -0.2),
    }[residue]
    if gold_surface in reranked:
        reranked[gold_surface] = fixed[0]
    if decoy_surface in reranked:
        reranked[decoy_surface] = fixed[1]
    if residue in _GREEDY_CORRECT:
        greedy, greedy_lp = gold_surface, -0.3
    else:
        # a free-form string absent from every passage, so it never collides
        # with a decoded span surface
        greedy, greedy_lp = f"freeform{i:03d}", -2.2
    return GenerativeOutput(question.id, greedy, greedy_lp, reranked)


def build_toy_fixture(seed: int = 7) -> ToyFixture:
    """The bundled end-to-end fixture; seed only perturbs the noise streams."""
    config = toy_config()
    examples, corpus = _build_corpus()
    retriever = TfidfScorer(corpus)
    runs = {}
    rerank_runs = {}
    reader_scores: dict[str, list[ReaderScores]] = {}
    reader_scores_b: dict[str, list[ReaderScores]] = {}
    generative = {}
    labels = {}
    subsets = ("question_overlap", "question_overlap", "answer_overlap_only",
               "answer_overlap_only", "no_overlap")
    for i, ex in enumerate(examples):
        qid = ex.question.id
        run = retrieve(ex.question, corpus, config.k, retriever)
        runs[qid] = run
        rerank_runs[qid] = _constructed_rerank(run, i)
        reader_scores[qid] = _reader_batch(i, rerank_runs[qid], corpus, (seed, 1), config.v)
        reader_scores_b[qid] = _reader_batch(i, rerank_runs[qid], corpus, (seed, 2), config.v)
        generative[qid] = _generative_output(i, ex.question, reader_scores[qid], corpus, config.m)
        labels[qid] = subsets[i % 5]
    return ToyFixture(
        examples=examples,
        corpus=corpus,
        runs=runs,
        rerank_runs=rerank_runs,
        reader_scores=reader_scores,
        reader_scores_b=reader_scores_b,
        generative=generative,
        labels=labels,
        config=config,
    )


def write_toy_fixture(out_dir: str | Path, seed: int = 7) -> dict[str, Path]:
    """Materialize the fixture as pipeline input files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fx = build_toy_fixture(seed)
    paths = {
        "questions": out / "questions.jsonl",
        "corpus": out / "corpus.jsonl",
        "run": out / "run.jsonl",
        "rerank_run": out / "rerank_run.jsonl",
        "reader_scores": out / "reader_scores.jsonl",
        "reader_scores_b": out / "reader_scores_b.jsonl",
        "generative": out / "generative.jsonl",
        "labels": out / "labels.jsonl",
        "gold_predictions": out / "gold_predictions.jsonl",
    }
    formats.write_questions(paths["questions"], fx.examples)
    formats.write_corpus(paths["corpus"], fx.corpus)
    formats.write_run(paths["run"], fx.runs)
    formats.write_run(paths["rerank_run"], fx.rerank_runs)
    formats.write_reader_scores(paths["reader_scores"], fx.reader_scores)
    formats.write_reader_scores(paths["reader_scores_b"], fx.reader_scores_b)
    formats.write_generative(paths["generative"], fx.generative)
    formats.write_labels(paths["labels"], fx.labels)
    from .metrics import SOURCE_EXTRACTIVE, Prediction

    formats.write_predictions(
        paths["gold_predictions"],
        [
            Prediction(ex.question.id, ex.question.gold_answers[0], SOURCE_EXTRACTIVE, 0.0)
            for ex in fx.examples
        ],
    )
    return paths


# --- separable training fixtures ---------------------------------------------


def separable_rerank_fixture(
    n_questions: int = 16,
) -> tuple[list[TrainingInstance], dict[str, Question], dict[str, Passage]]:
    """Reranker training set where token overlap perfectly identifies the
    positive passage."""
    questions = {}
    corpus = {}
    for i in range(n_questions):
        qid = f"sq{i:02d}"
        words = f"alpha{i:02d} beta{i:02d} gamma{i:02d}"
        questions[qid] = Question(qid, words, (f"alpha{i:02d}",))
        corpus[f"sp{i:02d}"] = Passage(
            f"sp{i:02d}", "", f"{words} plus unrelated filler text here"
        )
    instances = []
    pids = sorted(corpus)
    for i, qid in enumerate(sorted(questions)):
        negatives = tuple(pids[(i + j) % n_questions] for j in range(1, 4))
        instances.append(TrainingInstance(qid, pids[i], negatives))
    return instances, questions, corpus


def separable_aggregation_outputs(
    n_questions: int = 24, seed: int = 11
) -> tuple[dict[str, list[tuple[str, FusionFeatures]]], dict[str, tuple[str, ...]]]:
    """Aggregation inputs where log_p_e alone separates correct candidates.

    The other three features are constant within each question, so they
    cancel in the per-question softmax.
    """
    rng = np.random.default_rng(seed)
    outputs = {}
    gold = {}
    for i in range(n_questions):
        qid = f"aq{i:02d}"
        gold[qid] = (f"right{i:02d}",)
        shared = tuple(rng.normal(-3.0, 1.0, 3))
        rows = []
        for j in range(4):
            surface = f"right{i:02d}" if j == 0 else f"wrong{i:02d}_{j}"
            log_p_e = -1.0 if j == 0 else -5.0 + float(rng.normal(0.0, 0.2))
            rows.append(
                (surface, FusionFeatures(log_p_e, shared[0], shared[1], shared[2]))
            )
        outputs[qid] = rows
    return outputs, gold


def abstractive_always_correct_bd_fixture(
    n_items: int = 40, seed: int = 13
) -> list[BDItem]:
    """Binary-decision set where the abstractive answer is always the correct
    one and its log-probability strictly exceeds the aggregated span score."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_items):
        s_agg = float(rng.uniform(-6.0, -1.0))
        s_g_star = s_agg + float(rng.uniform(1.0, 3.0))
        items.append(BDItem(f"bq{i:02d}", s_agg, s_g_star, 1))
    return items


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        prog="python -m qapipe.fixture", description="materialize the toy fixture"
    )
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    paths = write_toy_fixture(args.out_dir, args.seed)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
