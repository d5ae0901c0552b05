"""Word tokenization, exact-match and best-F1 answer matching, and the
training-set filters built on them.

The best-F1 search scans span sizes in ascending order while maintaining a
length limit derived from the current best match: any span whose length
reaches the limit provably cannot beat the best score, so whole size classes
are skipped. A full-enumeration scorer with identical tie semantics is kept
alongside as the correctness oracle and as the benchmark baseline.

Matching is performed over lowercased word-level tokens of passage contexts.
Token-level hot loops are JIT-compiled; wrappers keep the string-level API.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .core import Passage, QAExample, Question, ScoredList


@dataclass(frozen=True)
class TokenSeq:
    """Lowercased tokens plus character offsets back into the source text."""

    tokens: tuple[str, ...]
    char_offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.char_offsets):
            raise ValueError("tokens and offsets must have equal length")
        prev_end = -1
        for start, end in self.char_offsets:
            if start < prev_end or end <= start:
                raise ValueError("offsets must be strictly increasing and non-overlapping")
            prev_end = end

    def __len__(self) -> int:
        return len(self.tokens)

    def surface(self, text: str, start: int, end: int) -> str:
        """Source substring covered by tokens start..end inclusive."""
        return text[self.char_offsets[start][0] : self.char_offsets[end][1]]


@dataclass(frozen=True)
class MatchSpan:
    """A matched span of passage tokens with its overlap F1 score."""

    start: int
    end: int
    f1: float

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError("invalid span bounds")
        if not 0.0 < self.f1 <= 1.0:
            raise ValueError("f1 must be in (0, 1]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class FilterReport:
    kept: int
    dropped_no_positive: int
    dropped_no_annotation: int

    @property
    def total(self) -> int:
        return self.kept + self.dropped_no_positive + self.dropped_no_annotation


def _is_word_char(ch: str) -> bool:
    # Letters, digits, and combining marks form token runs; marks keep
    # decomposed accents attached to their base character.
    return unicodedata.category(ch)[0] in ("L", "N", "M")


def _is_skipped(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch)[0] in ("Z", "C")


def tokenize(text: str) -> TokenSeq:
    """Split text into lowercase word tokens.

    Maximal runs of alphanumeric characters become one token; every other
    non-whitespace character becomes a single-character token. Offsets are
    codepoint indexes into the original text.
    """
    tokens: list[str] = []
    offsets: list[tuple[int, int]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if _is_word_char(ch):
            j = i + 1
            while j < n and _is_word_char(text[j]):
                j += 1
            tokens.append(text[i:j].lower())
            offsets.append((i, j))
            i = j
        elif _is_skipped(ch):
            i += 1
        else:
            tokens.append(ch.lower())
            offsets.append((i, i + 1))
            i += 1
    return TokenSeq(tuple(tokens), tuple(offsets))


def exact_match_spans(
    passage: TokenSeq | Sequence[str], answer: TokenSeq | Sequence[str]
) -> list[tuple[int, int]]:
    """All (possibly overlapping) occurrences of the answer token sequence."""
    p = passage.tokens if isinstance(passage, TokenSeq) else tuple(passage)
    a = answer.tokens if isinstance(answer, TokenSeq) else tuple(answer)
    if not a:
        raise ValueError("empty answer")
    hits = []
    for i in range(len(p) - len(a) + 1):
        if p[i : i + len(a)] == a:
            hits.append((i, i + len(a) - 1))
    return hits


def f1_overlap(
    span_tokens: TokenSeq | Sequence[str], answer_tokens: TokenSeq | Sequence[str]
) -> float:
    """Token-bag F1: 2*shared / (len(span) + len(answer)).

    Shared counts use multiset intersection so repeated tokens are not
    under-counted.
    """
    t = span_tokens.tokens if isinstance(span_tokens, TokenSeq) else tuple(span_tokens)
    a = answer_tokens.tokens if isinstance(answer_tokens, TokenSeq) else tuple(answer_tokens)
    if not t or not a:
        raise ValueError("spans must be non-empty")
    shared = sum((Counter(t) & Counter(a)).values())
    return 2.0 * shared / (len(t) + len(a))


def length_limit(t_len: int, a_len: int, s: int) -> float:
    """Smallest span length that provably cannot beat F1 of a span with
    length t_len sharing s tokens with a length-a_len answer."""
    if s == 0:
        raise ValueError("no shared tokens")
    if s < 0 or s > a_len or t_len < 1:
        raise ValueError("need 0 < s <= answer length and span length >= 1")
    return a_len * (t_len + a_len - s) / s


# --- token-id kernels -------------------------------------------------------
#
# Passage tokens are encoded as indexes into the answer's distinct-token
# vocabulary (-1 for tokens outside it); a_counts holds answer multiplicities.
# Both kernels report the span as (start, length, shared) plus the number of
# spans inspected; start == -1 means no span shares a token with the answer.


@njit(cache=True)
def _brute_kernel(p_ids, a_counts, a_len):
    n = p_ids.shape[0]
    nv = a_counts.shape[0]
    best_start = -1
    best_len = 0
    best_s = 0
    best_f1 = 0.0
    inspected = 0
    cnt = np.zeros(nv, np.int64)
    for start in range(n):
        for v in range(nv):
            cnt[v] = 0
        s = 0
        for end in range(start, n):
            v = p_ids[end]
            if v >= 0:
                cnt[v] += 1
                if cnt[v] <= a_counts[v]:
                    s += 1
            inspected += 1
            if s > 0:
                length = end - start + 1
                f1 = 2.0 * s / (length + a_len)
                # replace on strictly better (f1 desc, length asc, start asc)
                if f1 > best_f1 or (f1 == best_f1 and length < best_len):
                    best_f1 = f1
                    best_start = start
                    best_len = length
                    best_s = s
    return best_start, best_len, best_s, inspected


@njit(cache=True)
def _pruned_kernel(p_ids, a_counts, a_len, trace_size, trace_start, trace_shared):
    n = p_ids.shape[0]
    nv = a_counts.shape[0]
    cap = trace_size.shape[0]
    best_start = -1
    best_len = 0
    best_s = 0
    best_f1 = 0.0
    n_upd = 0
    inspected = 0
    act_size = 1
    len_limit = 2.0
    cnt = np.zeros(nv, np.int64)
    while act_size < len_limit and act_size <= n:
        for v in range(nv):
            cnt[v] = 0
        s = 0
        for i in range(act_size - 1):
            v = p_ids[i]
            if v >= 0:
                cnt[v] += 1
                if cnt[v] <= a_counts[v]:
                    s += 1
        for start in range(n - act_size + 1):
            v_in = p_ids[start + act_size - 1]
            if v_in >= 0:
                cnt[v_in] += 1
                if cnt[v_in] <= a_counts[v_in]:
                    s += 1
            inspected += 1
            if s > 0:
                f1 = 2.0 * s / (act_size + a_len)
                if f1 > best_f1:
                    best_f1 = f1
                    best_start = start
                    best_len = act_size
                    best_s = s
                    len_limit = a_len * (act_size + a_len - s) / s
                    if n_upd < cap:
                        trace_size[n_upd] = act_size
                        trace_start[n_upd] = start
                        trace_shared[n_upd] = s
                    n_upd += 1
            v_out = p_ids[start]
            if v_out >= 0:
                if cnt[v_out] <= a_counts[v_out]:
                    s -= 1
                cnt[v_out] -= 1
        act_size += 1
    return best_start, best_len, best_s, inspected, n_upd


_NO_TRACE = np.zeros(0, np.int64)


def encode_pair(
    passage_tokens: Sequence[str], answer_tokens: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Encode a (passage, answer) token pair for the id-level matchers."""
    vocab: dict[str, int] = {}
    counts: list[int] = []
    for tok in answer_tokens:
        idx = vocab.get(tok)
        if idx is None:
            vocab[tok] = len(counts)
            counts.append(1)
        else:
            counts[idx] += 1
    p_ids = np.fromiter(
        (vocab.get(tok, -1) for tok in passage_tokens), np.int64, len(passage_tokens)
    )
    return p_ids, np.asarray(counts, dtype=np.int64)


def brute_force_best_ids(p_ids: np.ndarray, a_counts: np.ndarray):
    """Full-enumeration search; returns (start, length, shared, inspected)."""
    return _brute_kernel(p_ids, a_counts, int(a_counts.sum()))


def soft_match_best_ids(p_ids: np.ndarray, a_counts: np.ndarray):
    """Pruned search; returns (start, length, shared, inspected)."""
    start, length, shared, inspected, _ = _pruned_kernel(
        p_ids, a_counts, int(a_counts.sum()), _NO_TRACE, _NO_TRACE, _NO_TRACE
    )
    return start, length, shared, inspected


@njit(cache=True)
def _brute_many_kernel(p_flat, p_off, ac_flat, ac_off, out):
    for i in range(p_off.shape[0] - 1):
        p = p_flat[p_off[i] : p_off[i + 1]]
        ac = ac_flat[ac_off[i] : ac_off[i + 1]]
        start, length, shared, inspected = _brute_kernel(p, ac, int(ac.sum()))
        out[i, 0] = start
        out[i, 1] = length
        out[i, 2] = shared
        out[i, 3] = inspected


@njit(cache=True)
def _pruned_many_kernel(p_flat, p_off, ac_flat, ac_off, no_trace, out):
    for i in range(p_off.shape[0] - 1):
        p = p_flat[p_off[i] : p_off[i + 1]]
        ac = ac_flat[ac_off[i] : ac_off[i + 1]]
        start, length, shared, inspected, _ = _pruned_kernel(
            p, ac, int(ac.sum()), no_trace, no_trace, no_trace
        )
        out[i, 0] = start
        out[i, 1] = length
        out[i, 2] = shared
        out[i, 3] = inspected


def pack_pairs(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate encoded pairs for the batch matchers."""
    p_off = np.zeros(len(pairs) + 1, np.int64)
    ac_off = np.zeros(len(pairs) + 1, np.int64)
    for i, (p_ids, a_counts) in enumerate(pairs):
        p_off[i + 1] = p_off[i] + p_ids.shape[0]
        ac_off[i + 1] = ac_off[i] + a_counts.shape[0]
    p_flat = np.concatenate([p for p, _ in pairs]) if pairs else np.zeros(0, np.int64)
    ac_flat = np.concatenate([a for _, a in pairs]) if pairs else np.zeros(0, np.int64)
    return p_flat.astype(np.int64), p_off, ac_flat.astype(np.int64), ac_off


def brute_force_best_many(packed) -> np.ndarray:
    """Batch full-enumeration search over packed pairs.

    Returns an (n, 4) array of (start, length, shared, inspected) rows; one
    jitted loop over the whole batch, so per-call dispatch overhead does not
    pollute benchmark comparisons.
    """
    p_flat, p_off, ac_flat, ac_off = packed
    out = np.empty((p_off.shape[0] - 1, 4), np.int64)
    _brute_many_kernel(p_flat, p_off, ac_flat, ac_off, out)
    return out


def soft_match_best_many(packed) -> np.ndarray:
    """Batch pruned search over packed pairs; same layout as the brute twin."""
    p_flat, p_off, ac_flat, ac_off = packed
    out = np.empty((p_off.shape[0] - 1, 4), np.int64)
    _pruned_many_kernel(p_flat, p_off, ac_flat, ac_off, _NO_TRACE, out)
    return out


def warm_up_matchers() -> None:
    """Force JIT compilation so later calls measure steady-state speed."""
    p_ids, a_counts = encode_pair(("a", "b"), ("a",))
    brute_force_best_ids(p_ids, a_counts)
    soft_match_best_ids(p_ids, a_counts)
    packed = pack_pairs([(p_ids, a_counts)])
    brute_force_best_many(packed)
    soft_match_best_many(packed)


def _tokens_of(seq: TokenSeq | Sequence[str]) -> tuple[str, ...]:
    return seq.tokens if isinstance(seq, TokenSeq) else tuple(seq)


def _as_span(start: int, length: int, shared: int, a_len: int) -> MatchSpan | None:
    if start < 0:
        return None
    f1 = 2.0 * shared / (length + a_len)
    return MatchSpan(start=start, end=start + length - 1, f1=f1)


def soft_match_best(
    passage: TokenSeq | Sequence[str], answer: TokenSeq | Sequence[str]
) -> MatchSpan | None:
    """Best-F1 span via the pruned size-ascending scan.

    Returns None iff no span shares a token with the answer. Among equal-F1
    spans the shortest wins, then the leftmost; exact or bag-equal matches
    come back with f1 == 1.0.
    """
    p, a = _tokens_of(passage), _tokens_of(answer)
    if not a:
        raise ValueError("empty answer")
    p_ids, a_counts = encode_pair(p, a)
    start, length, shared, _ = soft_match_best_ids(p_ids, a_counts)
    return _as_span(start, length, shared, len(a))


def brute_force_best(
    passage: TokenSeq | Sequence[str], answer: TokenSeq | Sequence[str]
) -> MatchSpan | None:
    """Best-F1 span by scoring every span; oracle twin of soft_match_best."""
    p, a = _tokens_of(passage), _tokens_of(answer)
    if not a:
        raise ValueError("empty answer")
    p_ids, a_counts = encode_pair(p, a)
    start, length, shared, _ = brute_force_best_ids(p_ids, a_counts)
    return _as_span(start, length, shared, len(a))


def soft_match_trace(
    passage: TokenSeq | Sequence[str], answer: TokenSeq | Sequence[str]
) -> tuple[MatchSpan | None, list[tuple[int, int, int]]]:
    """Pruned search plus its improvement history.

    The history lists (length, start, shared) for every best-span update, in
    order; the length limit after each update is length_limit(length, |a|, shared).
    """
    p, a = _tokens_of(passage), _tokens_of(answer)
    if not a:
        raise ValueError("empty answer")
    p_ids, a_counts = encode_pair(p, a)
    a_len = len(a)
    cap = a_len * a_len * a_len + a_len + 8
    trace_size = np.zeros(cap, np.int64)
    trace_start = np.zeros(cap, np.int64)
    trace_shared = np.zeros(cap, np.int64)
    start, length, shared, _, n_upd = _pruned_kernel(
        p_ids, a_counts, a_len, trace_size, trace_start, trace_shared
    )
    if n_upd > cap:
        raise RuntimeError("trace capacity exceeded")
    updates = [
        (int(trace_size[i]), int(trace_start[i]), int(trace_shared[i]))
        for i in range(n_upd)
    ]
    return _as_span(start, length, shared, a_len), updates


def benchmark_matchers(
    n_passages: int = 16741,
    passage_len: int = 100,
    answer_len: int = 3,
    alphabet: int = 40,
    seed: int = 0,
) -> dict:
    """Time the pruned matcher against full enumeration on synthetic text.

    Every answer shares at least one token with its passage (partial
    overlap), which is the regime where pruning pays off. Both matchers run
    over identical pre-encoded inputs; the report includes per-passage mean
    times, their ratio, and the fraction of identical results (which must
    be 1.0 — the two are exchangeable).
    """
    import time

    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(alphabet)]
    pairs = []
    for _ in range(n_passages):
        length = int(rng.integers(max(2, passage_len - 20), passage_len + 21))
        passage = [words[j] for j in rng.integers(0, alphabet, length)]
        answer = [passage[int(rng.integers(0, length))]] + [
            words[int(rng.integers(0, alphabet))] for _ in range(answer_len - 1)
        ]
        pairs.append(encode_pair(passage, answer))
    packed = pack_pairs(pairs)
    warm_up_matchers()
    t0 = time.perf_counter()
    brute = brute_force_best_many(packed)
    t_brute = time.perf_counter() - t0
    t0 = time.perf_counter()
    pruned = soft_match_best_many(packed)
    t_pruned = time.perf_counter() - t0
    identical = float((brute[:, :3] == pruned[:, :3]).all(axis=1).mean())
    return {
        "passages": n_passages,
        "mean_ms_brute": t_brute * 1000.0 / n_passages,
        "mean_ms_pruned": t_pruned * 1000.0 / n_passages,
        "speedup": t_brute / t_pruned if t_pruned > 0 else float("inf"),
        "identical_fraction": identical,
        "mean_inspected_brute": float(brute[:, 3].mean()),
        "mean_inspected_pruned": float(pruned[:, 3].mean()),
    }


# --- distant-supervision annotation and dataset filters ---------------------


def annotate_example(
    question: Question,
    passages: Sequence[Passage],
    golden_passage: Passage | None = None,
) -> dict[str, tuple[MatchSpan, ...]]:
    """Distant-supervision span annotations, keyed by passage id.

    Every gold answer contributes all of its exact-match spans in every
    passage. The golden passage additionally falls back to the single best
    soft-match span when it contains no exact match. Answers that match
    nowhere (no exact match and zero best F1 in the golden passage) are
    dropped silently.
    """
    if not question.gold_answers:
        raise ValueError(f"question {question.id!r} has no gold answers")
    toks: dict[str, TokenSeq] = {p.id: tokenize(p.context) for p in passages}
    if golden_passage is not None and golden_passage.id not in toks:
        toks[golden_passage.id] = tokenize(golden_passage.context)

    found: dict[str, set[MatchSpan]] = {}

    def add(pid: str, span: MatchSpan) -> None:
        found.setdefault(pid, set()).add(span)

    for answer in question.gold_answers:
        a_toks = tokenize(answer)
        if not a_toks.tokens:
            continue
        for p in passages:
            for s, e in exact_match_spans(toks[p.id], a_toks):
                add(p.id, MatchSpan(s, e, 1.0))
        if golden_passage is not None:
            g_toks = toks[golden_passage.id]
            exact = exact_match_spans(g_toks, a_toks)
            if exact:
                for s, e in exact:
                    add(golden_passage.id, MatchSpan(s, e, 1.0))
            else:
                soft = soft_match_best(g_toks, a_toks)
                if soft is not None:
                    add(golden_passage.id, soft)
    return {
        pid: tuple(sorted(spans, key=lambda m: (m.start, m.end)))
        for pid, spans in sorted(found.items())
    }


def _has_exact_match(
    passage_tokens: TokenSeq, answer_seqs: Sequence[TokenSeq]
) -> bool:
    return any(
        bool(exact_match_spans(passage_tokens, a)) for a in answer_seqs if a.tokens
    )


class _TokenCache:
    """Per-call tokenization cache over a passage corpus."""

    def __init__(self, corpus: Mapping[str, Passage]):
        self.corpus = corpus
        self._cache: dict[str, TokenSeq] = {}

    def get(self, pid: str) -> TokenSeq:
        seq = self._cache.get(pid)
        if seq is None:
            if pid not in self.corpus:
                raise ValueError(f"passage {pid!r} not in corpus")
            seq = tokenize(self.corpus[pid].context)
            self._cache[pid] = seq
        return seq


def _filter(
    examples: Sequence[QAExample],
    runs: Mapping[str, ScoredList],
    corpus: Mapping[str, Passage],
    keep_fn,
) -> tuple[list[QAExample], FilterReport]:
    cache = _TokenCache(corpus)
    kept: list[QAExample] = []
    no_positive = 0
    no_annotation = 0
    for ex in examples:
        qid = ex.question.id
        if qid not in runs:
            raise ValueError(f"no retrieval run for question {qid!r}")
        answer_seqs = [tokenize(a) for a in ex.question.gold_answers]
        answer_seqs = [a for a in answer_seqs if a.tokens]
        if not answer_seqs and ex.golden_passage_id is None:
            no_annotation += 1
            continue
        if keep_fn(ex, runs[qid], answer_seqs, cache):
            kept.append(ex)
        else:
            no_positive += 1
    return kept, FilterReport(len(kept), no_positive, no_annotation)


def filter_for_reranker(
    examples: Sequence[QAExample],
    runs: Mapping[str, ScoredList],
    corpus: Mapping[str, Passage],
    k: int,
) -> tuple[list[QAExample], FilterReport]:
    """Keep examples with a golden passage or an exact answer match in the
    top-k retrieved passages."""

    def keep(ex, run, answer_seqs, cache):
        if ex.golden_passage_id is not None:
            return True
        return any(
            _has_exact_match(cache.get(pid), answer_seqs) for pid in run.top(k).ids()
        )

    return _filter(examples, runs, corpus, keep)


def filter_for_extractive(
    examples: Sequence[QAExample],
    runs: Mapping[str, ScoredList],
    corpus: Mapping[str, Passage],
) -> tuple[list[QAExample], FilterReport]:
    """Keep examples with an exact answer match in the top-1 retrieved
    passage or in the golden passage."""

    def keep(ex, run, answer_seqs, cache):
        if not answer_seqs:
            return False
        top1 = run.ids()[:1]
        if top1 and _has_exact_match(cache.get(top1[0]), answer_seqs):
            return True
        if ex.golden_passage_id is not None:
            return _has_exact_match(cache.get(ex.golden_passage_id), answer_seqs)
        return False

    return _filter(examples, runs, corpus, keep)
