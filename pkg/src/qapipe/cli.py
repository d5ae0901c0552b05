"""Command-line batch orchestration for every pipeline stage.

Flags mirror RunConfig field names verbatim. Exit codes: 0 success, 1 usage,
2 schema violation (with line number), 3 runtime failure (including missing
upstream files, reported with the stage to run first). QAPIPE_DATA_DIR, when
set, is the base directory for relative file paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import formats, matching, metrics
from .core import QAExample
from .fusion import (
    MODES,
    TrainHyper,
    aggregate_and_select,
    build_aggregation_dataset,
    build_bd_dataset,
    train_aggregation,
    train_binary_decider,
)
from .generative import GenerativeOutput, UnigramScorer, assemble_reader_input, greedy_answer, rerank_answers
from .pipeline import DEFAULT_RERANK_WEIGHTS, PipelineResources, RunConfig, candidate_table, predict
from .ranking import (
    LexicalPairFeatures,
    LinearReranker,
    RerankHyper,
    TfidfScorer,
    build_training_instance,
    rescore,
    retrieve,
    train_reranker,
)
from .reader import LexicalReaderScorer, decode_top_m

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SCHEMA = 2
EXIT_RUNTIME = 3

# which stage produces each input flag, for actionable missing-file errors
_STAGE_OF_INPUT = {
    "corpus": "ingest-corpus",
    "run": "retrieve",
    "rerank_run": "rerank",
    "reader_scores": "read-extractive",
    "generative": "read-generative",
    "agg_model": "fuse-train",
    "bd_model": "bd-train",
    "model": "rerank-train",
    "predictions": "predict",
    "annotations": "annotate",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _data_dir() -> Path:
    return Path(os.environ.get("QAPIPE_DATA_DIR", "."))


def _path(value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else _data_dir() / p


def _open_input(args, name: str, reader):
    """Read an input file, translating a missing file into a stage hint."""
    path = _path(getattr(args, name))
    if not path.exists():
        stage = _STAGE_OF_INPUT.get(name)
        hint = f"; run `{stage}` first" if stage else ""
        raise FileNotFoundError(f"missing {name.replace('_', '-')} file {path}{hint}")
    return reader(path)


def _load_questions(args) -> list[QAExample]:
    return _open_input(args, "questions", formats.read_questions)


def _load_corpus(args):
    return _open_input(args, "corpus", formats.read_corpus)


def _golden_passage(example: QAExample, corpus):
    if example.golden_passage_id is None:
        return None
    if example.golden_passage_id not in corpus:
        raise ValueError(
            f"question {example.question.id!r}: golden passage "
            f"{example.golden_passage_id!r} not in corpus"
        )
    return corpus[example.golden_passage_id]


def _tune_subset(examples, split: str):
    ordered = sorted(examples, key=lambda ex: ex.question.id)
    if split == "all":
        return ordered
    offset = 1 if split == "odd" else 0
    return ordered[offset::2]


def _add_config_flags(parser, *names, config=RunConfig()):
    for name in names:
        default = getattr(config, name)
        if name == "mode":
            parser.add_argument("--mode", choices=MODES, default=default)
        elif name in ("readers", "rankers"):
            parser.add_argument(f"--{name}", default=default)
        else:
            parser.add_argument(f"--{name}", type=int, default=default)


# --- subcommand handlers ------------------------------------------------------


def _cmd_ingest_corpus(args) -> int:
    corpus = _open_input(args, "input", formats.read_corpus)
    formats.write_corpus(_path(args.output), corpus)
    print(f"ingested {len(corpus)} passages -> {_path(args.output)}")
    return EXIT_OK


def _cmd_retrieve(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    provider = TfidfScorer(corpus)
    runs = {
        ex.question.id: retrieve(ex.question, corpus, args.k, provider)
        for ex in examples
    }
    formats.write_run(_path(args.output), runs)
    print(f"retrieved top-{args.k} for {len(runs)} questions -> {_path(args.output)}")
    return EXIT_OK


def _cmd_rerank_train(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    runs = _open_input(args, "run", formats.read_run)
    kept, report = matching.filter_for_reranker(examples, runs, corpus, args.k)
    rng = np.random.default_rng(args.seed)
    hyper = RerankHyper(
        instance_size=args.n,
        negative_pool=args.negative_pool,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        rng_seed=args.seed,
    )
    instances = []
    for ex in kept:
        inst = build_training_instance(ex, runs[ex.question.id], hyper, rng, corpus)
        if inst is not None:
            instances.append(inst)
    if not instances:
        raise RuntimeError("no usable training instances after filtering and sampling")
    provider = LinearReranker(LexicalPairFeatures(idf=TfidfScorer(corpus).idf, runs=runs))
    result = train_reranker(
        instances,
        provider,
        hyper,
        questions={ex.question.id: ex.question for ex in kept},
        corpus=corpus,
    )
    formats.write_rerank_model(_path(args.output), provider.features.names, result.weights)
    print(
        f"trained on {len(instances)} instances "
        f"(filter kept {report.kept}/{report.total}); "
        f"loss {result.loss_trace[0]:.4f} -> {result.loss_trace[-1]:.4f}"
    )
    return EXIT_OK


def _rerank_provider(args, corpus, runs) -> LinearReranker:
    features = LexicalPairFeatures(idf=TfidfScorer(corpus).idf, runs=runs)
    if getattr(args, "model", None):
        names, weights = _open_input(args, "model", formats.read_rerank_model)
        if names != features.names:
            raise ValueError(f"model features {names!r} do not match {features.names!r}")
        return LinearReranker(features, weights)
    return LinearReranker(features, weights=list(DEFAULT_RERANK_WEIGHTS))


def _cmd_rerank(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    runs = _open_input(args, "run", formats.read_run)
    provider = _rerank_provider(args, corpus, runs)
    out = {}
    for ex in examples:
        if ex.question.id not in runs:
            raise ValueError(f"no retrieval run for question {ex.question.id!r}")
        pool = runs[ex.question.id].top(args.rescore_pool)
        out[ex.question.id] = rescore(ex.question, pool, provider, corpus)
    formats.write_run(_path(args.output), out)
    print(f"reranked {len(out)} questions -> {_path(args.output)}")
    return EXIT_OK


def _cmd_annotate(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    runs = _open_input(args, "run", formats.read_run)
    annotations = {}
    for ex in examples:
        if not ex.question.gold_answers:
            continue
        if ex.question.id not in runs:
            raise ValueError(f"no retrieval run for question {ex.question.id!r}")
        passages = [corpus[pid] for pid in runs[ex.question.id].top(args.v).ids()]
        spans = matching.annotate_example(ex.question, passages, _golden_passage(ex, corpus))
        if spans:
            annotations[ex.question.id] = spans
    formats.write_annotations(_path(args.output), annotations)
    print(f"annotated {len(annotations)} questions -> {_path(args.output)}")
    return EXIT_OK


def _cmd_filter(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    runs = _open_input(args, "run", formats.read_run)
    if args.stage == "reranker":
        kept, report = matching.filter_for_reranker(examples, runs, corpus, args.k)
    else:
        kept, report = matching.filter_for_extractive(examples, runs, corpus)
    formats.write_questions(_path(args.output), kept)
    print(
        json.dumps(
            {
                "stage": args.stage,
                "kept": report.kept,
                "dropped_no_positive": report.dropped_no_positive,
                "dropped_no_annotation": report.dropped_no_annotation,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def _cmd_read_extractive(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    runs = _open_input(args, "rerank_run", formats.read_run)
    scorer = LexicalReaderScorer(idf=TfidfScorer(corpus).idf, max_span_len=args.max_span_len)
    batches = {}
    for ex in examples:
        if ex.question.id not in runs:
            raise ValueError(f"no rerank run for question {ex.question.id!r}")
        passages = [corpus[pid] for pid in runs[ex.question.id].top(args.v).ids()]
        batches[ex.question.id] = scorer.score_batch(ex.question, passages)
    formats.write_reader_scores(_path(args.output), batches, raw_tensors=args.raw_tensors)
    print(f"scored {len(batches)} questions -> {_path(args.output)}")
    return EXIT_OK


def _cmd_read_generative(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    runs = _open_input(args, "rerank_run", formats.read_run)
    batches = _open_input(args, "reader_scores", formats.read_reader_scores)
    scorer = UnigramScorer()
    outputs = {}
    for ex in examples:
        qid = ex.question.id
        if qid not in runs:
            raise ValueError(f"no rerank run for question {qid!r}")
        if qid not in batches:
            raise ValueError(f"question {qid!r}: missing component output: reader scores")
        spans = decode_top_m(batches[qid], args.m, corpus=corpus)
        passages = assemble_reader_input(runs[qid], args.v2, corpus)
        reranked = rerank_answers(scorer, ex.question, passages, spans)
        greedy, greedy_lp = greedy_answer(scorer, ex.question, passages)
        outputs[qid] = GenerativeOutput(qid, greedy, greedy_lp, reranked)
    formats.write_generative(_path(args.output), outputs)
    print(f"generated for {len(outputs)} questions -> {_path(args.output)}")
    return EXIT_OK


def _resources(args, examples, corpus, mode: str) -> PipelineResources:
    config = RunConfig(
        k=args.k,
        n=args.n,
        v=args.v,
        v2=args.v2,
        m=args.m,
        max_span_len=args.max_span_len,
        seed=args.seed,
        mode=mode,
        readers=args.readers,
        rankers=args.rankers,
        jobs=getattr(args, "jobs", 1),
    )
    load = lambda name, reader: (
        _open_input(args, name, reader) if getattr(args, name, None) else None
    )
    return PipelineResources(
        corpus=corpus,
        config=config,
        runs=load("run", formats.read_run),
        rerank_runs=load("rerank_run", formats.read_run),
        reader_scores=load("reader_scores", formats.read_reader_scores),
        generative=load("generative", formats.read_generative),
        agg_model=load("agg_model", formats.read_aggregation_model),
        bd_model=load("bd_model", formats.read_bd_model),
    )


def _cmd_fuse_train(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    tune = _tune_subset(examples, args.tune_split)
    res = _resources(args, tune, corpus, mode="naive")
    results = predict(tune, res)
    gold = {ex.question.id: ex.question.gold_answers for ex in tune}
    dataset = build_aggregation_dataset(candidate_table(results), gold)
    if not dataset:
        raise RuntimeError("no question has a correct candidate; cannot tune aggregation")
    model, trace = train_aggregation(
        dataset,
        res.config.feature_config(),
        TrainHyper(args.learning_rate, args.epochs),
    )
    formats.write_aggregation_model(_path(args.output), model)
    print(
        f"tuned aggregation on {len(dataset)} questions ({args.tune_split} split); "
        f"loss {trace[0]:.4f} -> {trace[-1]:.4f}"
    )
    return EXIT_OK


def _cmd_bd_train(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    tune = _tune_subset(examples, args.tune_split)
    res = _resources(args, tune, corpus, mode="naive")
    res.agg_model = _open_input(args, "agg_model", formats.read_aggregation_model)
    results = predict(tune, res)
    gold = {ex.question.id: ex.question.gold_answers for ex in tune}
    agg_preds = {}
    greedy_preds = {}
    for r in results:
        qid = r.prediction.question_id
        best, s_agg = aggregate_and_select(res.agg_model, r.candidates)
        agg_preds[qid] = (best.span.surface, s_agg)
        greedy_preds[qid] = (r.generative.greedy_answer, r.generative.greedy_log_prob)
    dataset = build_bd_dataset(agg_preds, greedy_preds, gold)
    if not dataset:
        raise RuntimeError(
            "no question has exactly one correct prediction; cannot tune the binary decider"
        )
    decider, trace = train_binary_decider(dataset, TrainHyper(args.learning_rate, args.epochs))
    formats.write_bd_model(_path(args.output), decider)
    print(
        f"tuned binary decider on {len(dataset)} questions ({args.tune_split} split); "
        f"loss {trace[0]:.4f} -> {trace[-1]:.4f}"
    )
    return EXIT_OK


def _cmd_predict(args) -> int:
    examples = _load_questions(args)
    corpus = _load_corpus(args)
    res = _resources(args, examples, corpus, mode=args.mode)
    results = predict(examples, res, jobs=args.jobs)
    formats.write_predictions(_path(args.output), [r.prediction for r in results])
    print(f"predicted {len(results)} questions ({args.mode}) -> {_path(args.output)}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    predictions = _open_input(args, "predictions", formats.read_predictions)
    examples = _load_questions(args)
    gold = {ex.question.id: ex.question.gold_answers for ex in examples}
    pred_map = {p.question_id: p.answer for p in predictions}
    em = metrics.em_report(pred_map, gold, ascii_punct=args.ascii_punct)
    accuracy = None
    accuracy_n = 0
    if args.run:
        if not args.corpus:
            raise ValueError("--corpus is required when --run is given")
        runs = _open_input(args, "run", formats.read_run)
        corpus = _load_corpus(args)
        ks = [int(x) for x in args.ks.split(",") if x]
        eval_runs = {qid: run for qid, run in runs.items() if gold.get(qid)}
        accuracy = metrics.accuracy_at_k(eval_runs, gold, corpus, ks)
        accuracy_n = len(eval_runs)
    overlap = None
    if args.labels:
        labels = _open_input(args, "labels", formats.read_labels)
        overlap = metrics.overlap_report(pred_map, gold, labels, ascii_punct=args.ascii_punct)
    rows = metrics.report_rows(em=em, accuracy=accuracy, accuracy_n=accuracy_n, overlap=overlap)
    if args.output:
        formats.write_report(_path(args.output), rows)
    print(metrics.format_report(rows))
    return EXIT_OK


def _cmd_bench_softmatch(args) -> int:
    report = matching.benchmark_matchers(
        n_passages=args.passages,
        passage_len=args.passage_len,
        answer_len=args.answer_len,
        alphabet=args.alphabet,
        seed=args.seed,
    )
    print(json.dumps(report, sort_keys=True))
    if report["identical_fraction"] != 1.0:
        raise RuntimeError("pruned and brute-force matchers disagree")
    return EXIT_OK


# --- parser wiring ------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="qapipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(handler=handler)
        return p

    p = add("ingest-corpus", _cmd_ingest_corpus, help="validate and canonicalize a corpus file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = add("retrieve", _cmd_retrieve, help="TF-IDF retrieval run")
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus", required=True)
    _add_config_flags(p, "k")
    p.add_argument("--output", required=True)

    p = add("rerank-train", _cmd_rerank_train, help="train the linear reranker")
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    _add_config_flags(p, "k", "n", "seed")
    p.add_argument("--negative_pool", type=int, default=400)
    p.add_argument("--learning_rate", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--output", required=True)

    p = add("rerank", _cmd_rerank, help="rescore a retrieval run")
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--model")
    p.add_argument("--rescore_pool", type=int, default=200)
    p.add_argument("--output", required=True)

    p = add("annotate", _cmd_annotate, help="distant-supervision span annotations")
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    _add_config_flags(p, "v")
    p.add_argument("--output", required=True)

    p = add("filter", _cmd_filter, help="training-set filters")
    p.add_argument("--stage", choices=("reranker", "extractive"), required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    _add_config_flags(p, "k")
    p.add_argument("--output", required=True)

    p = add("read-extractive", _cmd_read_extractive, help="score passages with the lexical reader")
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--rerank_run", required=True)
    _add_config_flags(p, "v", "max_span_len")
    p.add_argument("--raw_tensors", action="store_true")
    p.add_argument("--output", required=True)

    p = add("read-generative", _cmd_read_generative, help="greedy answer plus span reranking")
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--rerank_run", required=True)
    p.add_argument("--reader_scores", required=True)
    _add_config_flags(p, "m", "v2")
    p.add_argument("--output", required=True)

    def pipeline_inputs(p, *, require_mode):
        p.add_argument("--questions", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--run")
        p.add_argument("--rerank_run")
        p.add_argument("--reader_scores")
        p.add_argument("--generative")
        _add_config_flags(p, "k", "n", "v", "v2", "m", "max_span_len", "seed", "readers", "rankers")
        if require_mode:
            _add_config_flags(p, "mode")

    p = add("fuse-train", _cmd_fuse_train, help="tune score aggregation on a question split")
    pipeline_inputs(p, require_mode=False)
    p.add_argument("--tune_split", choices=("odd", "even", "all"), required=True)
    p.add_argument("--learning_rate", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--output", required=True)

    p = add("bd-train", _cmd_bd_train, help="tune the binary decider on a question split")
    pipeline_inputs(p, require_mode=False)
    p.add_argument("--agg_model", required=True)
    p.add_argument("--tune_split", choices=("odd", "even", "all"), required=True)
    p.add_argument("--learning_rate", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--output", required=True)

    p = add("predict", _cmd_predict, help="run the full pipeline")
    pipeline_inputs(p, require_mode=True)
    p.add_argument("--agg_model")
    p.add_argument("--bd_model")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output", required=True)

    p = add("evaluate", _cmd_evaluate, help="EM, Accuracy@K, and overlap reports")
    p.add_argument("--predictions", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus")
    p.add_argument("--run")
    p.add_argument("--ks", default="1,5,10,20")
    p.add_argument("--labels")
    p.add_argument("--ascii_punct", action="store_true")
    p.add_argument("--output")

    p = add("bench-softmatch", _cmd_bench_softmatch, help="pruned vs brute-force matcher timing")
    p.add_argument("--passages", type=int, default=16741)
    p.add_argument("--passage_len", type=int, default=100)
    p.add_argument("--answer_len", type=int, default=3)
    p.add_argument("--alphabet", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except formats.SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, LookupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
