"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete. Every tolerance is pinned here, not configurable.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from qapipe import formats
from qapipe.cli import EXIT_OK, main as cli_main
from qapipe.core import ScoredList, softmax_over_set
from qapipe.fixture import (
    abstractive_always_correct_bd_fixture,
    separable_aggregation_outputs,
    separable_rerank_fixture,
)
from qapipe.fusion import (
    FeatureConfig,
    TrainHyper,
    aggregate_and_select,
    aggregation_loss_and_grad,
    bd_loss_and_grad,
    build_aggregation_dataset,
    build_bd_dataset,
    decide,
    posterior_average_ensemble,
    train_aggregation,
    train_binary_decider,
)
from qapipe.matching import (
    benchmark_matchers,
    brute_force_best_ids,
    encode_pair,
    exact_match_spans,
    soft_match_best_ids,
    soft_match_trace,
    tokenize,
)
from qapipe.metrics import accuracy_at_k, em_score, exact_match, has_answer, normalize_answer
from qapipe.pipeline import PipelineResources, candidate_table, predict
from qapipe.core import Passage
from qapipe.ranking import ce_loss_and_grad, passage_probs, train_reranker, LexicalPairFeatures, LinearReranker, RerankHyper
from qapipe.reader import (
    Factorization,
    ReaderScores,
    SpanAnnotation,
    band_mask,
    decode_top_m,
    normalize_reader_scores,
    span_posterior,
    verify_inter_intra_identity,
)


def _report(number: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"[criterion {number:02d}] {name}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {number} ({name}) failed: {detail}"


def _random_reader_batch(rng, max_passages=5, max_len=30, max_width=8):
    batch = []
    for i in range(int(rng.integers(1, max_passages + 1))):
        L = int(rng.integers(1, max_len + 1))
        W = int(rng.integers(1, min(max_width, L) + 1))
        mask = band_mask(L, W) & (rng.random((L, W)) < 0.8)
        if not mask.any():
            mask = band_mask(L, W)
        batch.append(
            ReaderScores(
                f"p{i}",
                rng.normal(0, 2, L),
                rng.normal(0, 2, L),
                rng.normal(0, 2, (L, W)),
                float(rng.normal(0, 2)),
                mask,
            )
        )
    return batch


def _corpus_for(batch):
    return {
        rs.passage_id: Passage(rs.passage_id, "", " ".join(f"tk{i}" for i in range(rs.length)))
        for rs in batch
    }


# ---------------------------------------------------------------------------


def test_criterion_01_soft_match_oracle_equivalence(jit_warm):
    rng = np.random.default_rng(101)
    alphabet = [f"t{i}" for i in range(6)]
    n_pairs = 100_000
    t0 = time.perf_counter()
    mismatches = 0
    none_cases = 0
    for _ in range(n_pairs):
        p_len = int(rng.integers(1, 121))
        a_len = int(rng.integers(1, 9))
        p = [alphabet[j] for j in rng.integers(0, len(alphabet), p_len)]
        a = [alphabet[j] for j in rng.integers(0, len(alphabet), a_len)]
        p_ids, a_counts = encode_pair(p, a)
        pruned = soft_match_best_ids(p_ids, a_counts)[:3]
        brute = brute_force_best_ids(p_ids, a_counts)[:3]
        if pruned != brute:
            mismatches += 1
        if pruned[0] == -1:
            none_cases += 1
    elapsed = time.perf_counter() - t0
    _report(
        1,
        "soft-match oracle equivalence",
        mismatches == 0 and elapsed < 60.0,
        f"{n_pairs} pairs, {mismatches} mismatches, {none_cases} None cases, {elapsed:.1f}s",
    )


def test_criterion_02_soft_match_speedup(jit_warm):
    report = benchmark_matchers(n_passages=16741, passage_len=100, answer_len=3, seed=202)
    ok = report["identical_fraction"] == 1.0 and report["speedup"] >= 3.0
    _report(
        2,
        "pruned matcher speedup",
        ok,
        f"speedup {report['speedup']:.1f}x, identical {report['identical_fraction']:.0%}, "
        f"{report['mean_ms_brute']:.4f} vs {report['mean_ms_pruned']:.4f} ms/passage",
    )


def test_criterion_03_length_limit_soundness(jit_warm):
    rng = np.random.default_rng(303)
    # the bound s*t <= a*(t+a-s) holds for every valid integer triple
    n_triples = 1_000_000
    a = rng.integers(1, 60, n_triples)
    s = (rng.random(n_triples) * a).astype(np.int64) + 1
    t = rng.integers(1, 400, n_triples)
    bound_violations = int((s * t > a * (t + a - s)).sum())

    # along real matcher traces, no span at or above the current length
    # limit may strictly beat the best F1; exact integer arithmetic
    pruning_violations = 0
    alphabet = [f"t{i}" for i in range(5)]
    for _ in range(10_000):
        p_len = int(rng.integers(1, 81))
        a_len = int(rng.integers(1, 9))
        p = [alphabet[j] for j in rng.integers(0, len(alphabet), p_len)]
        ans = [alphabet[j] for j in rng.integers(0, len(alphabet), a_len)]
        _, updates = soft_match_trace(p, ans)
        if not updates:
            continue
        p_ids, a_counts = encode_pair(p, ans)
        cums = np.zeros((a_counts.shape[0], p_len + 1), np.int64)
        for v in range(a_counts.shape[0]):
            cums[v, 1:] = np.cumsum(p_ids == v)
        # occurrence counts of each answer token in every span [i, j)
        occ = cums[:, None, :] - cums[:, :, None]  # (v, start, end_excl); end < start is negative
        shared = np.minimum(occ, a_counts[:, None, None]).clip(min=0).sum(axis=0)
        starts, ends = np.triu_indices(p_len + 1, k=1)
        span_len = (ends - starts).astype(np.int64)
        span_shared = shared[starts, ends].astype(np.int64)
        for size, _, s_best in updates:
            at_or_above = s_best * span_len >= a_len * (size + a_len - s_best)
            beats = span_shared * (size + a_len) > s_best * (span_len + a_len)
            pruning_violations += int((at_or_above & beats).sum())
    _report(
        3,
        "length-limit bound and pruning soundness",
        bound_violations == 0 and pruning_violations == 0,
        f"{n_triples} triples, 10000 traces, "
        f"{bound_violations} bound / {pruning_violations} pruning violations",
    )


def test_criterion_04_inter_intra_identity():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        batch = _random_reader_batch(rng, max_passages=3, max_len=12, max_width=4)
        valid = [(rs.passage_id, s, e) for rs in batch for s, e in rs.valid_spans()]
        picks = rng.choice(len(valid), size=int(rng.integers(1, min(5, len(valid)) + 1)), replace=False)
        anns = [SpanAnnotation(*valid[i]) for i in picks]
        lhs, rhs = verify_inter_intra_identity(batch, anns)
        rel = abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs))
        worst = max(worst, rel)
    _report(4, "start/end marginalization identity", worst < 1e-9, f"worst relative gap {worst:.2e}")


def test_criterion_05_decode_oracle():
    rng = np.random.default_rng(505)
    subsets = [Factorization.parse(s) for s in ("I", "J", "C", "IJ", "IC", "JC", "IJC")]
    checked = 0
    for case in range(500):
        if case == 0:
            # fully tied tensors exercise the deterministic tie rule
            batch = [
                ReaderScores(f"p{i}", np.zeros(4), np.zeros(4), np.zeros((4, 3)), 0.0, band_mask(4, 3))
                for i in range(2)
            ]
        else:
            batch = _random_reader_batch(rng)
        corpus = _corpus_for(batch)
        dists = normalize_reader_scores(batch)

        # independent oracle: pool raw scores with numpy, enumerate and sort
        def np_log_softmax(pairs):
            keys = [k for k, _ in pairs]
            vals = np.array([v for _, v in pairs])
            out = vals - (np.max(vals) + math.log(np.exp(vals - np.max(vals)).sum()))
            return dict(zip(keys, out))

        start_lp = np_log_softmax(
            [((rs.passage_id, s), rs.s_start[s])
             for rs in batch
             for s in np.flatnonzero(rs.span_mask.any(axis=1))]
        )
        end_keys = {}
        joint_items = []
        for rs in batch:
            for s, e in rs.valid_spans():
                end_keys[(rs.passage_id, e)] = rs.s_end[e]
                joint_items.append(((rs.passage_id, s, e), rs.s_joint[s, e - s]))
        end_lp = np_log_softmax(sorted(end_keys.items()))
        joint_lp = np_log_softmax(joint_items)
        passage_lp = np_log_softmax([(rs.passage_id, rs.s_passage) for rs in batch])

        for fact in subsets:
            expected = []
            for rs in batch:
                for s, e in rs.valid_spans():
                    score = 0.0
                    if "I" in fact.flags:
                        score += start_lp[(rs.passage_id, s)] + end_lp[(rs.passage_id, e)]
                    if "J" in fact.flags:
                        score += joint_lp[(rs.passage_id, s, e)]
                    if "C" in fact.flags:
                        score += passage_lp[rs.passage_id]
                    expected.append((score, rs.passage_id, s, e))
            expected.sort(key=lambda x: (-x[0], x[1], x[2], x[3]))
            got = decode_top_m(batch, len(expected), fact, corpus=corpus, dists=dists)
            assert [(g.passage_id, g.start, g.end) for g in got] == [
                (pid, s, e) for _, pid, s, e in expected
            ], f"ordering mismatch for factorization {fact}"
            for g, (score, *_rest) in zip(got, expected):
                assert g.log_p_e == pytest.approx(score, abs=1e-9)
            checked += 1
    _report(5, "span decoding vs enumeration oracle", True, f"{checked} batch/factorization checks")


def test_criterion_06_normalization():
    rng = np.random.default_rng(606)
    worst = 0.0

    def track(dist):
        nonlocal worst
        worst = max(worst, abs(math.fsum(math.exp(lp) for _, lp in dist.items) - 1.0))

    for _ in range(200):
        size = int(rng.integers(1, 40))
        run = ScoredList.from_scores("q", {f"p{i}": float(s) for i, s in enumerate(rng.normal(0, 5, size))})
        track(passage_probs(run))
    for _ in range(100):
        batch = _random_reader_batch(rng)
        dists = normalize_reader_scores(batch)
        for d in (dists.start, dists.end, dists.joint, dists.passage):
            track(d)
        track(span_posterior(batch, dists=dists))
    for _ in range(100):
        size = int(rng.integers(1, 30))
        track(softmax_over_set({i: float(v) for i, v in enumerate(rng.normal(0, 8, size))}))
    _report(6, "distribution normalization", worst <= 1e-9, f"worst |sum-1| = {worst:.2e}")


def test_criterion_07_gradient_checks():
    rng = np.random.default_rng(707)
    eps = 1e-5

    def rel(a, b):
        return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)

    worst = {"rerank": 0.0, "aggregation": 0.0, "bd": 0.0}
    for _ in range(100):
        n, d = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        F = rng.normal(0, 2, (n, d))
        w = rng.normal(0, 1, d)
        pos = int(rng.integers(0, n))
        _, grad = ce_loss_and_grad(F, pos, w)
        fd = np.zeros(d)
        for j in range(d):
            wp, wm = w.copy(), w.copy()
            wp[j] += eps
            wm[j] -= eps
            fd[j] = (ce_loss_and_grad(F, pos, wp)[0] - ce_loss_and_grad(F, pos, wm)[0]) / (2 * eps)
        worst["rerank"] = max(worst["rerank"], rel(grad, fd))

    for _ in range(100):
        n, d = int(rng.integers(2, 8)), int(rng.integers(1, 5))
        X = rng.normal(0, 2, (n, d))
        correct = np.zeros(n, dtype=bool)
        correct[: int(rng.integers(1, n))] = True
        rng.shuffle(correct)
        w, b = rng.normal(0, 1, d), float(rng.normal())
        _, gw, gb = aggregation_loss_and_grad(X, correct, w, b)
        fd = np.zeros(d + 1)
        for j in range(d):
            wp, wm = w.copy(), w.copy()
            wp[j] += eps
            wm[j] -= eps
            fd[j] = (
                aggregation_loss_and_grad(X, correct, wp, b)[0]
                - aggregation_loss_and_grad(X, correct, wm, b)[0]
            ) / (2 * eps)
        fd[d] = (
            aggregation_loss_and_grad(X, correct, w, b + eps)[0]
            - aggregation_loss_and_grad(X, correct, w, b - eps)[0]
        ) / (2 * eps)
        worst["aggregation"] = max(worst["aggregation"], rel(np.append(gw, gb), fd))

    for _ in range(100):
        n = int(rng.integers(2, 12))
        X = rng.normal(0, 2, (n, 2))
        t = rng.integers(0, 2, n).astype(float)
        w, b = rng.normal(0, 1, 2), float(rng.normal())
        _, gw, gb = bd_loss_and_grad(X, t, w, b)
        fd = np.zeros(3)
        for j in range(2):
            wp, wm = w.copy(), w.copy()
            wp[j] += eps
            wm[j] -= eps
            fd[j] = (bd_loss_and_grad(X, t, wp, b)[0] - bd_loss_and_grad(X, t, wm, b)[0]) / (2 * eps)
        fd[2] = (bd_loss_and_grad(X, t, w, b + eps)[0] - bd_loss_and_grad(X, t, w, b - eps)[0]) / (2 * eps)
        worst["bd"] = max(worst["bd"], rel(np.append(gw, gb), fd))

    ok = all(v < 1e-4 for v in worst.values())
    _report(7, "analytic vs finite-difference gradients", ok,
            ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))


def test_criterion_08_training_on_separable_fixtures():
    instances, questions, corpus = separable_rerank_fixture()
    provider = LinearReranker(LexicalPairFeatures(idf={}))
    rr = train_reranker(
        instances,
        provider,
        RerankHyper(instance_size=4, negative_pool=4, learning_rate=0.5, epochs=300),
        questions=questions,
        corpus=corpus,
    )
    outputs, gold = separable_aggregation_outputs()
    agg_dataset = build_aggregation_dataset(outputs, gold)
    _, agg_trace = train_aggregation(agg_dataset, FeatureConfig(), TrainHyper(0.5, 400))
    monotone = all(a >= b - 1e-12 for a, b in zip(agg_trace, agg_trace[1:]))
    bd_items = abstractive_always_correct_bd_fixture()
    _, bd_trace = train_binary_decider(bd_items, TrainHyper(0.5, 400))
    ok = rr.loss_trace[-1] < 0.05 and agg_trace[-1] < 0.05 and bd_trace[-1] < 0.05 and monotone
    _report(
        8,
        "separable-fixture training",
        ok,
        f"rerank {rr.loss_trace[-1]:.4f}, aggregation {agg_trace[-1]:.4f} "
        f"(monotone={monotone}), bd {bd_trace[-1]:.4f}",
    )


def test_criterion_09_fusion_direction(toy):
    gold = toy.gold
    train_q, eval_q = toy.train_eval_split()
    res = PipelineResources(
        corpus=toy.corpus,
        config=replace(toy.config, mode="naive"),
        runs=toy.runs,
        rerank_runs=toy.rerank_runs,
        reader_scores=toy.reader_scores,
        generative=toy.generative,
    )
    results = predict(toy.examples, res)
    by_qid = {r.prediction.question_id: r for r in results}
    cands = candidate_table(results)

    dataset = build_aggregation_dataset({q: cands[q] for q in train_q}, gold)
    model, _ = train_aggregation(dataset, toy.config.feature_config(), TrainHyper(0.5, 400))

    def em(fn):
        return sum(exact_match(fn(q), gold[q]) for q in eval_q) / len(eval_q)

    ext_em = em(lambda q: decode_top_m(toy.reader_scores[q], 1, corpus=toy.corpus)[0].surface)
    naive_em = em(
        lambda q: min(toy.generative[q].reranked.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    )
    aggr_em = em(lambda q: aggregate_and_select(model, by_qid[q].candidates)[0].span.surface)

    def ensemble_answer(q):
        pa = span_posterior(toy.reader_scores[q])
        pb = span_posterior(toy.reader_scores_b[q])
        key = posterior_average_ensemble([pa, pb])
        spans = decode_top_m(toy.reader_scores[q], 10_000, corpus=toy.corpus)
        return next(s.surface for s in spans if (s.passage_id, s.start, s.end) == key)

    ens_em = em(ensemble_answer)
    best_single = max(ext_em, naive_em)
    gain_aggr = aggr_em - best_single
    gain_ens = ens_em - ext_em
    ok = aggr_em >= best_single and gain_aggr > gain_ens
    _report(
        9,
        "aggregation beats single readers and posterior averaging",
        ok,
        f"ext {ext_em:.2f}, naive {naive_em:.2f}, aggr {aggr_em:.2f}, "
        f"ensemble {ens_em:.2f}; gains {gain_aggr:.2f} vs {gain_ens:.2f}",
    )


def test_criterion_10_binary_decision_semantics():
    rng = np.random.default_rng(1010)
    for _ in range(500):
        n = int(rng.integers(1, 15))
        gold = {f"q{i}": ["gold"] for i in range(n)}
        agg = {
            f"q{i}": ("gold" if rng.random() < 0.5 else "nope", float(rng.normal()))
            for i in range(n)
        }
        greedy = {
            f"q{i}": ("gold" if rng.random() < 0.5 else "nope", float(rng.normal()))
            for i in range(n)
        }
        for item in build_bd_dataset(agg, greedy, gold):
            ext_ok = agg[item.question_id][0] == "gold"
            abs_ok = greedy[item.question_id][0] == "gold"
            assert ext_ok != abs_ok, "both-correct or both-wrong item leaked through"
            assert item.target == int(abs_ok)

    items = abstractive_always_correct_bd_fixture()
    decider, _ = train_binary_decider(items, TrainHyper(0.5, 400))
    n_abstractive = sum(decide(decider, it.s_agg, it.s_g_star) == "abstractive" for it in items)
    _report(
        10,
        "binary-decision dataset rules and learned preference",
        n_abstractive == len(items),
        f"500 random datasets clean; decider abstractive on {n_abstractive}/{len(items)}",
    )


def test_criterion_11_metrics(toy_files):
    rng = np.random.default_rng(1111)
    corpus = {
        "hit": Passage("hit", "", "the answer paris is here"),
        **{f"m{i}": Passage(f"m{i}", "", f"filler number {i}") for i in range(4)},
    }
    pids = sorted(corpus)
    for _ in range(1000):
        order = rng.permutation(pids)
        run = ScoredList.from_scores("q", {pid: -float(i) for i, pid in enumerate(order)})
        acc = accuracy_at_k({"q": run}, {"q": ["paris"]}, corpus, [1, 2, 3, 4, 5])
        values = [acc[k] for k in sorted(acc)]
        assert values == sorted(values), "accuracy_at_k not monotone"

    import string as _string

    alphabet = np.array(list(_string.ascii_letters + _string.digits + _string.punctuation + "  «»—ěščřÅß"))
    n_strings = 100_000
    lengths = rng.integers(0, 24, n_strings)
    for length in lengths:
        s = "".join(rng.choice(alphabet, size=length))
        once = normalize_answer(s)
        assert normalize_answer(once) == once, f"not idempotent on {s!r}"

    gold_preds = {
        p.question_id: p.answer for p in formats.read_predictions(toy_files["gold_predictions"])
    }
    examples = formats.read_questions(toy_files["questions"])
    gold = {ex.question.id: ex.question.gold_answers for ex in examples}
    em_value = em_score(gold_preds, gold)

    tokens = [f"t{i}" for i in range(4)]
    consistent = True
    for _ in range(10_000):
        p_toks = [tokens[i] for i in rng.integers(0, 4, rng.integers(1, 12))]
        a_toks = [tokens[i] for i in rng.integers(0, 4, rng.integers(1, 4))]
        passage = Passage("p", "", " ".join(p_toks))
        answer = " ".join(a_toks)
        spans = exact_match_spans(tokenize(passage.context), tokenize(answer))
        if has_answer(passage, [answer]) != bool(spans):
            consistent = False
            break
    _report(
        11,
        "metric properties",
        em_value == 1.0 and consistent,
        f"gold-copy EM {em_value}, containment consistent on 10000 pairs, "
        f"idempotency on {n_strings} strings",
    )


def test_criterion_12_end_to_end_determinism(toy_files, tmp_path):
    base = [
        "--questions", str(toy_files["questions"]),
        "--corpus", str(toy_files["corpus"]),
        "--run", str(toy_files["run"]),
        "--rerank_run", str(toy_files["rerank_run"]),
        "--reader_scores", str(toy_files["reader_scores"]),
        "--generative", str(toy_files["generative"]),
        "--k", "8", "--n", "4", "--v", "4", "--v2", "4", "--m", "10",
        "--max_span_len", "3", "--seed", "7",
    ]
    agg = tmp_path / "agg.json"
    bd = tmp_path / "bd.json"
    assert cli_main(
        ["fuse-train", *base, "--tune_split", "odd", "--output", str(agg)]
    ) == EXIT_OK
    assert cli_main(
        ["bd-train", *base, "--agg_model", str(agg), "--tune_split", "odd", "--output", str(bd)]
    ) == EXIT_OK

    outputs = []
    for tag, jobs in (("a", "1"), ("b", "1"), ("c", "8")):
        out = tmp_path / f"pred_{tag}.jsonl"
        code = cli_main(
            ["predict", *base, "--mode", "aggr+bd", "--agg_model", str(agg),
             "--bd_model", str(bd), "--jobs", jobs, "--output", str(out)]
        )
        assert code == EXIT_OK
        outputs.append(out.read_bytes())
    identical_reruns = outputs[0] == outputs[1]
    identical_jobs = outputs[0] == outputs[2]
    _report(
        12,
        "end-to-end determinism",
        identical_reruns and identical_jobs,
        f"rerun identical={identical_reruns}, jobs 1 vs 8 identical={identical_jobs}",
    )
