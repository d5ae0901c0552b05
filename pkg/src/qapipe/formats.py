"""JSONL file formats shared by every pipeline stage.

Every file is UTF-8 JSONL whose first record is a header {"format", "version"}.
Writers emit records in a deterministic order with sorted object keys and go
through a temp-file-then-rename step, so reruns are byte-identical and a
failed stage never leaves a partial output. Readers validate each line and
raise SchemaError with the offending line number.

Reader-score tensors may optionally live in a side-by-side raw little-endian
float64 container referenced by filename from each record.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .core import Passage, QAExample, Question, ScoredList
from .fusion import AggregationModel, BinaryDecider
from .generative import GenerativeOutput
from .matching import MatchSpan
from .metrics import OVERLAP_SUBSETS, Prediction
from .reader import ReaderScores

FORMAT_VERSION = 1

QUESTIONS = "questions"
CORPUS = "corpus"
RUN = "run"
READER_SCORES = "reader_scores"
GENERATIVE = "generative"
PREDICTIONS = "predictions"
LABELS = "labels"
ANNOTATIONS = "annotations"
REPORT = "report"


class SchemaError(Exception):
    """A malformed record; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str | Path, fmt: str, records: Iterable[Mapping]) -> None:
    """Write header plus records; all-or-nothing via temp file and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(_dump({"format": fmt, "version": FORMAT_VERSION}) + "\n")
            for record in records:
                fh.write(_dump(record) + "\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_jsonl(path: str | Path, fmt: str) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, record) after validating the header."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise SchemaError(line_no, "record must be a JSON object")
            if line_no == 1:
                if obj.get("format") != fmt:
                    raise SchemaError(
                        line_no, f"expected format {fmt!r}, found {obj.get('format')!r}"
                    )
                if obj.get("version") != FORMAT_VERSION:
                    raise SchemaError(line_no, f"unsupported version {obj.get('version')!r}")
                continue
            yield line_no, obj


def _require(obj: dict, line: int, field: str, types) -> object:
    if field not in obj:
        raise SchemaError(line, f"missing field {field!r}")
    value = obj[field]
    if not isinstance(value, types):
        raise SchemaError(line, f"field {field!r} has wrong type {type(value).__name__}")
    return value


def _float(obj: dict, line: int, field: str) -> float:
    value = _require(obj, line, field, (int, float))
    value = float(value)
    if not math.isfinite(value):
        raise SchemaError(line, f"field {field!r} must be finite")
    return value


# --- questions ---------------------------------------------------------------


def write_questions(path, examples: Sequence[QAExample]) -> None:
    def records():
        for ex in sorted(examples, key=lambda e: e.question.id):
            rec = {
                "id": ex.question.id,
                "text": ex.question.text,
                "answers": list(ex.question.gold_answers),
            }
            if ex.golden_passage_id is not None:
                rec["golden_passage"] = ex.golden_passage_id
            yield rec

    write_jsonl(path, QUESTIONS, records())


def read_questions(path) -> list[QAExample]:
    out = []
    seen = set()
    for line, obj in read_jsonl(path, QUESTIONS):
        qid = _require(obj, line, "id", str)
        if qid in seen:
            raise SchemaError(line, f"duplicate question id {qid!r}")
        seen.add(qid)
        text = _require(obj, line, "text", str)
        answers = _require(obj, line, "answers", list)
        if not all(isinstance(a, str) for a in answers):
            raise SchemaError(line, "answers must be strings")
        golden = obj.get("golden_passage")
        if golden is not None and not isinstance(golden, str):
            raise SchemaError(line, "golden_passage must be a string")
        try:
            question = Question(qid, text, tuple(answers))
        except ValueError as exc:
            raise SchemaError(line, str(exc)) from exc
        out.append(QAExample(question, golden))
    return out


# --- corpus ------------------------------------------------------------------


def write_corpus(path, corpus: Mapping[str, Passage]) -> None:
    write_jsonl(
        path,
        CORPUS,
        (
            {"id": p.id, "title": p.title, "context": p.context}
            for _, p in sorted(corpus.items())
        ),
    )


def read_corpus(path) -> dict[str, Passage]:
    out: dict[str, Passage] = {}
    for line, obj in read_jsonl(path, CORPUS):
        pid = _require(obj, line, "id", str)
        if pid in out:
            raise SchemaError(line, f"duplicate passage id {pid!r}")
        title = _require(obj, line, "title", str)
        context = _require(obj, line, "context", str)
        try:
            out[pid] = Passage(pid, title, context)
        except ValueError as exc:
            raise SchemaError(line, str(exc)) from exc
    return out


# --- retrieval / rerank runs -------------------------------------------------


def write_run(path, runs: Mapping[str, ScoredList]) -> None:
    def records():
        for qid in sorted(runs):
            for rank, (pid, score) in enumerate(runs[qid].entries, start=1):
                yield {"qid": qid, "pid": pid, "score": score, "rank": rank}

    write_jsonl(path, RUN, records())


def read_run(path) -> dict[str, ScoredList]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    for line, obj in read_jsonl(path, RUN):
        qid = _require(obj, line, "qid", str)
        pid = _require(obj, line, "pid", str)
        score = _float(obj, line, "score")
        rank = _require(obj, line, "rank", int)
        group = rows.setdefault(qid, [])
        if rank != len(group) + 1:
            raise SchemaError(line, f"rank {rank} out of order for question {qid!r}")
        if group and group[-1][2] < score:
            raise SchemaError(line, f"scores must be non-increasing for question {qid!r}")
        group.append((rank, pid, score))
    out = {}
    for qid, group in rows.items():
        try:
            out[qid] = ScoredList(qid, tuple((pid, score) for _, pid, score in group))
        except ValueError as exc:
            raise SchemaError(0, f"question {qid!r}: {exc}") from exc
    return out


# --- reader scores -----------------------------------------------------------


def write_reader_scores(
    path, batches: Mapping[str, Sequence[ReaderScores]], raw_tensors: bool = False
) -> None:
    """One record per (question, passage).

    With raw_tensors the three score tensors are appended to a side-by-side
    '<name>.f64' little-endian container and each record stores the file name
    and element offset instead of inline lists.
    """
    path = Path(path)
    raw_name = path.name + ".f64"
    raw_values: list[float] = []

    def tensor_fields(rs: ReaderScores) -> dict:
        if not raw_tensors:
            return {
                "s_start": list(rs.s_start),
                "s_end": list(rs.s_end),
                "s_joint_band": [list(row) for row in rs.s_joint],
            }
        offset = len(raw_values)
        raw_values.extend(rs.s_start.tolist())
        raw_values.extend(rs.s_end.tolist())
        raw_values.extend(rs.s_joint.reshape(-1).tolist())
        return {"raw_file": raw_name, "raw_offset": offset}

    def records():
        for qid in sorted(batches):
            for rs in batches[qid]:
                yield {
                    "qid": qid,
                    "pid": rs.passage_id,
                    "L": rs.length,
                    "max_span_len": rs.max_span_len,
                    "s_passage": rs.s_passage,
                    "mask_band": [[int(v) for v in row] for row in rs.span_mask],
                    **tensor_fields(rs),
                }

    records_list = list(records())
    if raw_tensors:
        tmp = path.with_name(raw_name + ".tmp")
        try:
            np.asarray(raw_values, dtype="<f8").tofile(tmp)
            os.replace(tmp, path.with_name(raw_name))
        except BaseException:
            tmp.unlink(missing_ok=True)
            raise
    write_jsonl(path, READER_SCORES, records_list)


def read_reader_scores(path) -> dict[str, list[ReaderScores]]:
    path = Path(path)
    raw_cache: dict[str, np.ndarray] = {}

    def raw_slice(line: int, name: str, offset: int, count: int) -> np.ndarray:
        if name not in raw_cache:
            raw_path = path.with_name(name)
            if not raw_path.exists():
                raise SchemaError(line, f"raw tensor file {name!r} not found")
            raw_cache[name] = np.fromfile(raw_path, dtype="<f8")
        data = raw_cache[name]
        if offset < 0 or offset + count > data.shape[0]:
            raise SchemaError(line, f"raw tensor slice out of bounds in {name!r}")
        return data[offset : offset + count]

    out: dict[str, list[ReaderScores]] = {}
    for line, obj in read_jsonl(path, READER_SCORES):
        qid = _require(obj, line, "qid", str)
        pid = _require(obj, line, "pid", str)
        L = _require(obj, line, "L", int)
        width = _require(obj, line, "max_span_len", int)
        s_passage = _float(obj, line, "s_passage")
        mask = _require(obj, line, "mask_band", list)
        if "raw_file" in obj:
            name = _require(obj, line, "raw_file", str)
            offset = _require(obj, line, "raw_offset", int)
            flat = raw_slice(line, name, offset, 2 * L + L * width)
            s_start = flat[:L].copy()
            s_end = flat[L : 2 * L].copy()
            s_joint = flat[2 * L :].reshape(L, width).copy()
        else:
            s_start = np.asarray(_require(obj, line, "s_start", list), dtype=np.float64)
            s_end = np.asarray(_require(obj, line, "s_end", list), dtype=np.float64)
            s_joint = np.asarray(_require(obj, line, "s_joint_band", list), dtype=np.float64)
        try:
            mask_arr = np.asarray(mask, dtype=bool)
            if mask_arr.shape != (L, width) or s_start.shape != (L,):
                raise ValueError("tensor shapes do not match L and max_span_len")
            rs = ReaderScores(pid, s_start, s_end, s_joint, s_passage, mask_arr)
        except (ValueError, TypeError) as exc:
            raise SchemaError(line, str(exc)) from exc
        out.setdefault(qid, []).append(rs)
    return out


# --- generative outputs ------------------------------------------------------


def write_generative(path, outputs: Mapping[str, GenerativeOutput]) -> None:
    write_jsonl(
        path,
        GENERATIVE,
        (
            {
                "qid": qid,
                "greedy": out.greedy_answer,
                "greedy_logp": out.greedy_log_prob,
                "reranked": dict(sorted(out.reranked.items())),
            }
            for qid, out in sorted(outputs.items())
        ),
    )


def read_generative(path) -> dict[str, GenerativeOutput]:
    out = {}
    for line, obj in read_jsonl(path, GENERATIVE):
        qid = _require(obj, line, "qid", str)
        if qid in out:
            raise SchemaError(line, f"duplicate question id {qid!r}")
        greedy = _require(obj, line, "greedy", str)
        greedy_logp = _float(obj, line, "greedy_logp")
        reranked = _require(obj, line, "reranked", dict)
        if not all(isinstance(k, str) and isinstance(v, (int, float)) for k, v in reranked.items()):
            raise SchemaError(line, "reranked must map strings to numbers")
        try:
            out[qid] = GenerativeOutput(qid, greedy, greedy_logp, {k: float(v) for k, v in reranked.items()})
        except ValueError as exc:
            raise SchemaError(line, str(exc)) from exc
    return out


# --- predictions -------------------------------------------------------------


def write_predictions(path, predictions: Sequence[Prediction]) -> None:
    write_jsonl(
        path,
        PREDICTIONS,
        (
            {"qid": p.question_id, "answer": p.answer, "source": p.source, "score": p.score}
            for p in sorted(predictions, key=lambda p: p.question_id)
        ),
    )


def read_predictions(path) -> list[Prediction]:
    out = []
    seen = set()
    for line, obj in read_jsonl(path, PREDICTIONS):
        qid = _require(obj, line, "qid", str)
        if qid in seen:
            raise SchemaError(line, f"duplicate question id {qid!r}")
        seen.add(qid)
        try:
            out.append(
                Prediction(
                    qid,
                    _require(obj, line, "answer", str),
                    _require(obj, line, "source", str),
                    _float(obj, line, "score"),
                )
            )
        except ValueError as exc:
            raise SchemaError(line, str(exc)) from exc
    return out


# --- overlap labels ----------------------------------------------------------


def write_labels(path, labels: Mapping[str, str]) -> None:
    write_jsonl(
        path,
        LABELS,
        ({"qid": qid, "subset": subset} for qid, subset in sorted(labels.items())),
    )


def read_labels(path) -> dict[str, str]:
    out = {}
    for line, obj in read_jsonl(path, LABELS):
        qid = _require(obj, line, "qid", str)
        subset = _require(obj, line, "subset", str)
        if subset not in OVERLAP_SUBSETS:
            raise SchemaError(line, f"unknown subset {subset!r}")
        if qid in out:
            raise SchemaError(line, f"duplicate question id {qid!r}")
        out[qid] = subset
    return out


# --- span annotations --------------------------------------------------------


def write_annotations(path, annotations: Mapping[str, Mapping[str, Sequence[MatchSpan]]]) -> None:
    """annotations: question id -> passage id -> spans."""

    def records():
        for qid in sorted(annotations):
            for pid in sorted(annotations[qid]):
                for span in annotations[qid][pid]:
                    yield {
                        "qid": qid,
                        "pid": pid,
                        "start": span.start,
                        "end": span.end,
                        "f1": span.f1,
                    }

    write_jsonl(path, ANNOTATIONS, records())


def read_annotations(path) -> dict[str, dict[str, list[MatchSpan]]]:
    out: dict[str, dict[str, list[MatchSpan]]] = {}
    for line, obj in read_jsonl(path, ANNOTATIONS):
        qid = _require(obj, line, "qid", str)
        pid = _require(obj, line, "pid", str)
        try:
            span = MatchSpan(
                _require(obj, line, "start", int),
                _require(obj, line, "end", int),
                _float(obj, line, "f1"),
            )
        except ValueError as exc:
            raise SchemaError(line, str(exc)) from exc
        out.setdefault(qid, {}).setdefault(pid, []).append(span)
    return out


# --- report rows -------------------------------------------------------------


def write_report(path, rows: Sequence[Mapping]) -> None:
    write_jsonl(path, REPORT, rows)


# --- model files (plain JSON objects) ----------------------------------------


def _write_json(path, obj: Mapping) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(_dump(obj) + "\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(1, f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError(1, "model file must hold a JSON object")
    return obj


def write_aggregation_model(path, model: AggregationModel) -> None:
    _write_json(
        path,
        {"feature_names": list(model.feature_names), "w": list(model.w), "b": model.b},
    )


def read_aggregation_model(path) -> AggregationModel:
    obj = _read_json(path)
    try:
        return AggregationModel(
            tuple(_require(obj, 1, "feature_names", list)),
            tuple(_require(obj, 1, "w", list)),
            _float(obj, 1, "b"),
        )
    except ValueError as exc:
        raise SchemaError(1, str(exc)) from exc


def write_bd_model(path, decider: BinaryDecider) -> None:
    _write_json(
        path,
        {"feature_names": ["s_agg", "s_g_star"], "w": list(decider.w), "b": decider.b},
    )


def read_bd_model(path) -> BinaryDecider:
    obj = _read_json(path)
    w = _require(obj, 1, "w", list)
    if len(w) != 2:
        raise SchemaError(1, "bd model must have exactly two weights")
    try:
        return BinaryDecider((float(w[0]), float(w[1])), _float(obj, 1, "b"))
    except (ValueError, TypeError) as exc:
        raise SchemaError(1, str(exc)) from exc


def write_rerank_model(path, feature_names: Sequence[str], weights: Sequence[float]) -> None:
    _write_json(path, {"feature_names": list(feature_names), "w": list(weights), "b": 0.0})


def read_rerank_model(path) -> tuple[tuple[str, ...], np.ndarray]:
    obj = _read_json(path)
    names = tuple(_require(obj, 1, "feature_names", list))
    weights = np.asarray(_require(obj, 1, "w", list), dtype=np.float64)
    if weights.shape != (len(names),):
        raise SchemaError(1, "weight dimension must equal feature count")
    return names, weights
