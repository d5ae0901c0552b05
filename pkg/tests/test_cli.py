import json

import pytest

from qapipe import formats
from qapipe.cli import EXIT_OK, EXIT_RUNTIME, EXIT_SCHEMA, EXIT_USAGE, main


def _toy_args(toy_files, *names):
    out = []
    for name in names:
        out.extend([f"--{name}", str(toy_files[name])])
    return out


def _config_args():
    return ["--k", "8", "--n", "4", "--v", "4", "--v2", "4", "--m", "10", "--max_span_len", "3"]


class TestExitCodes:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["retrieve", "--questions", "x"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_file_names_stage(self, toy_files, capsys):
        code = main(
            ["predict", "--questions", str(toy_files["questions"]),
             "--corpus", str(toy_files["corpus"]),
             "--rerank_run", "nope.jsonl", "--mode", "naive",
             *_config_args(), "--output", "x.jsonl"]
        )
        assert code == EXIT_RUNTIME
        assert "run `rerank` first" in capsys.readouterr().err

    def test_schema_error_gives_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"format":"corpus","version":1}\n{"id":"p","title":""}\n')
        code = main(["ingest-corpus", "--input", str(bad), "--output", str(tmp_path / "o.jsonl")])
        assert code == EXIT_SCHEMA
        assert "line 2" in capsys.readouterr().err


class TestPipelineCommands:
    def test_filter_reports(self, toy_files, tmp_path, capsys):
        out = tmp_path / "filtered.jsonl"
        code = main(
            ["filter", "--stage", "reranker",
             *_toy_args(toy_files, "questions", "corpus", "run"),
             "--k", "8", "--output", str(out)]
        )
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["kept"] == 50
        assert len(formats.read_questions(out)) == 50

    def test_annotate_finds_gold_spans(self, toy_files, tmp_path, capsys):
        out = tmp_path / "ann.jsonl"
        code = main(
            ["annotate", *_toy_args(toy_files, "questions", "corpus", "run"),
             "--v", "4", "--output", str(out)]
        )
        assert code == EXIT_OK
        ann = formats.read_annotations(out)
        assert len(ann) == 50
        assert any(span.f1 == 1.0 for span in ann["q000"]["p000g"])

    def test_predict_deterministic_across_jobs(self, toy_files, tmp_path):
        outs = []
        for jobs in ("1", "8"):
            out = tmp_path / f"pred{jobs}.jsonl"
            code = main(
                ["predict", *_toy_args(toy_files, "questions", "corpus", "run"),
                 "--rerank_run", str(toy_files["rerank_run"]),
                 "--reader_scores", str(toy_files["reader_scores"]),
                 "--generative", str(toy_files["generative"]),
                 *_config_args(), "--mode", "naive", "--jobs", jobs,
                 "--output", str(out)]
            )
            assert code == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_evaluate_gold_copy_is_perfect(self, toy_files, tmp_path, capsys):
        report_path = tmp_path / "report.jsonl"
        code = main(
            ["evaluate", "--predictions", str(toy_files["gold_predictions"]),
             "--questions", str(toy_files["questions"]),
             "--corpus", str(toy_files["corpus"]),
             "--run", str(toy_files["run"]), "--ks", "1,2,8",
             "--labels", str(toy_files["labels"]),
             "--output", str(report_path)]
        )
        assert code == EXIT_OK
        rows = [obj for _, obj in formats.read_jsonl(report_path, formats.REPORT)]
        em = next(r for r in rows if r["metric"] == "em")
        assert em["value"] == 1.0 and em["n"] == 50
        acc = {r["k"]: r["value"] for r in rows if r["metric"] == "accuracy_at_k"}
        assert acc[1] <= acc[2] <= acc[8]
        table = capsys.readouterr().out
        assert "em_overlap" in table

    def test_bench_softmatch_small(self, capsys, jit_warm):
        code = main(["bench-softmatch", "--passages", "300", "--seed", "5"])
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["identical_fraction"] == 1.0
        assert report["passages"] == 300

    def test_rerank_train_then_rerank(self, toy_files, tmp_path, capsys):
        model = tmp_path / "model.json"
        code = main(
            ["rerank-train", *_toy_args(toy_files, "questions", "corpus", "run"),
             "--k", "8", "--n", "4", "--negative_pool", "8",
             "--learning_rate", "0.5", "--epochs", "60", "--seed", "1",
             "--output", str(model)]
        )
        assert code == EXIT_OK
        out = tmp_path / "rr.jsonl"
        code = main(
            ["rerank", *_toy_args(toy_files, "questions", "corpus", "run"),
             "--model", str(model), "--output", str(out)]
        )
        assert code == EXIT_OK
        runs = formats.read_run(out)
        assert len(runs) == 50
