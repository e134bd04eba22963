"""Batch-selection policies and full reranking loops.

``run_ts_setrank`` spends ``T_f`` rounds on uniformly drawn batches and the
rest on Thompson-sampled batches, updating the posterior after every
verdict. ``run_ts_setrank_t`` is the same loop with posterior updates held
in counters and flushed every ``tau`` rounds. ``run_heapify`` is the
deterministic triplet-heap baseline.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .bandit import PosteriorTable, apply_counts, final_ranking, init_priors, update_posterior
from .judge import Batch, JudgeVerdict

log = logging.getLogger(__name__)

JudgeFn = Callable[[Batch], JudgeVerdict]

UNIFORM = "uniform"
THOMPSON = "thompson"
HEAPIFY = "heapify"


@dataclass
class PolicyConfig:
    budget_T: int
    explore_Tf: int
    batch_size_b: int = 10
    flush_tau: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.budget_T < 0:
            raise ValueError("budget_T must be non-negative")
        if not 0 <= self.explore_Tf <= self.budget_T:
            raise ValueError(f"explore_Tf={self.explore_Tf} must lie in [0, {self.budget_T}]")
        if self.batch_size_b < 1:
            raise ValueError("batch_size_b must be positive")
        if self.flush_tau < 1:
            raise ValueError("flush_tau must be >= 1")


@dataclass
class TraceRecord:
    round: int
    phase: str
    batch: Batch
    verdict: JudgeVerdict


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    snapshots: dict[int, list[str]] = field(default_factory=dict)
    snapshot_means: dict[int, list[float]] = field(default_factory=dict)
    judge_calls: int = 0
    failed_round: int | None = None

    @property
    def batches(self) -> list[tuple[int, Batch, JudgeVerdict]]:
        return [(r.round, r.batch, r.verdict) for r in self.records]

    def record(self, t: int, phase: str, batch: Batch, verdict: JudgeVerdict) -> None:
        self.judge_calls += 1
        self.records.append(TraceRecord(t, phase, batch, verdict))

    def snapshot(self, t: int, table: PosteriorTable) -> None:
        ranking = final_ranking(table)
        self.snapshots[t] = ranking
        self.snapshot_means[t] = [table.entries[d].alpha / (table.entries[d].alpha + table.entries[d].beta)
                                  for d in ranking]

    def to_jsonl(self) -> str:
        lines = []
        for i, r in enumerate(self.records, 1):
            lines.append(json.dumps({
                "round": r.round,
                "phase": r.phase,
                "batch": list(r.batch.doc_ids),
                "verdict_bits": [int(r.verdict.bits[d]) for d in r.batch.doc_ids],
                "judge_calls_so_far": i,
            }, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)

    def snapshots_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "rank", "doc_id", "posterior_mean"])
        for t in sorted(self.snapshots):
            for rank, (d, m) in enumerate(zip(self.snapshots[t], self.snapshot_means[t]), 1):
                w.writerow([t, rank, d, repr(float(m))])
        return buf.getvalue()


class PolicyAborted(RuntimeError):
    """A judge call failed mid-run; ``trace`` holds everything up to the failing round."""

    def __init__(self, round_: int, trace: RunTrace, cause: BaseException):
        super().__init__(f"judge failed at round {round_}: {cause}")
        self.round = round_
        self.trace = trace
        self.__cause__ = cause


def _ids(candidates) -> list[str]:
    if isinstance(candidates, PosteriorTable):
        return list(candidates.doc_order)
    if hasattr(candidates, "doc_ids"):
        return list(candidates.doc_ids)
    return [c if isinstance(c, str) else c[0] for c in candidates]


def sample_uniform_batch(candidates, b: int, rng: np.random.Generator, round_: int = 0) -> Batch:
    ids = _ids(candidates)
    if not 1 <= b <= len(ids):
        raise ValueError(f"batch size {b} outside [1, {len(ids)}]")
    picks = rng.choice(len(ids), size=b, replace=False)
    return Batch([ids[i] for i in picks], round_)


def thompson_select_batch(table: PosteriorTable, b: int, rng: np.random.Generator, round_: int = 0) -> Batch:
    n = len(table.doc_order)
    if not 1 <= b <= n:
        raise ValueError(f"batch size {b} outside [1, {n}]")
    draws = rng.beta(table.alphas(), table.betas())
    # stable sort on the negated draws: equal draws keep first-stage order
    top = np.argsort(-draws, kind="stable")[:b]
    return Batch([table.doc_order[i] for i in top], round_)


def _judge(judge: JudgeFn, batch: Batch, t: int, trace: RunTrace) -> JudgeVerdict:
    try:
        verdict = judge(batch)
    except Exception as e:
        trace.failed_round = t
        raise PolicyAborted(t, trace, e) from e
    if set(verdict.bits) != set(batch.doc_ids):
        trace.failed_round = t
        err = ValueError(f"verdict keys {sorted(verdict.bits)} do not match batch {batch.doc_ids}")
        raise PolicyAborted(t, trace, err)
    return verdict


def _check_snapshots(snapshot_rounds: Iterable[int], T: int) -> set[int]:
    rounds = set(int(t) for t in snapshot_rounds)
    bad = [t for t in rounds if not 0 <= t <= T]
    if bad:
        raise ValueError(f"snapshot rounds {sorted(bad)} outside [0, {T}]")
    return rounds


def run_ts_setrank(candidates, judge: JudgeFn, cfg: PolicyConfig, snapshot_rounds: Sequence[int] = (),
                   rng: np.random.Generator | None = None) -> tuple[list[str], RunTrace]:
    table = init_priors(candidates)
    if cfg.batch_size_b > len(table):
        raise ValueError(f"batch size {cfg.batch_size_b} exceeds {len(table)} candidates")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    snaps = _check_snapshots(snapshot_rounds, cfg.budget_T)
    trace = RunTrace()
    if 0 in snaps:
        trace.snapshot(0, table)
    for t in range(1, cfg.budget_T + 1):
        if t <= cfg.explore_Tf:
            phase, batch = UNIFORM, sample_uniform_batch(table, cfg.batch_size_b, rng, t)
        else:
            phase, batch = THOMPSON, thompson_select_batch(table, cfg.batch_size_b, rng, t)
        verdict = _judge(judge, batch, t, trace)
        update_posterior(table, verdict)
        trace.record(t, phase, batch, verdict)
        if t in snaps:
            trace.snapshot(t, table)
    return final_ranking(table), trace


def run_ts_setrank_t(candidates, judge: JudgeFn, cfg: PolicyConfig, snapshot_rounds: Sequence[int] = (),
                     rng: np.random.Generator | None = None,
                     on_flush: Callable[[int, PosteriorTable], None] | None = None) -> tuple[list[str], RunTrace]:
    """Delayed-update variant.

    Verdicts go into per-document success/failure counters. Counters are
    flushed into the posterior when ``t % tau == 0`` or ``t == T_f`` during
    the uniform phase, when ``(t - T_f) % tau == 0`` during the Thompson
    phase, and once more after round ``T``. With ``tau == 1`` every round
    flushes and the run matches ``run_ts_setrank`` exactly.
    """
    table = init_priors(candidates)
    if cfg.batch_size_b > len(table):
        raise ValueError(f"batch size {cfg.batch_size_b} exceeds {len(table)} candidates")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    snaps = _check_snapshots(snapshot_rounds, cfg.budget_T)
    T, Tf, tau = cfg.budget_T, cfg.explore_Tf, cfg.flush_tau
    succ: dict[str, int] = {}
    fail: dict[str, int] = {}

    def flush(t: int) -> None:
        apply_counts(table, succ, fail)
        succ.clear()
        fail.clear()
        if on_flush is not None:
            on_flush(t, table)

    trace = RunTrace()
    if 0 in snaps:
        trace.snapshot(0, table)
    for t in range(1, T + 1):
        if t <= Tf:
            phase, batch = UNIFORM, sample_uniform_batch(table, cfg.batch_size_b, rng, t)
        else:
            phase, batch = THOMPSON, thompson_select_batch(table, cfg.batch_size_b, rng, t)
        verdict = _judge(judge, batch, t, trace)
        for d, r in verdict.bits.items():
            if r not in (0, 1):
                raise ValueError(f"verdict bit for {d!r} must be 0 or 1, got {r!r}")
            if d not in table:
                raise KeyError(f"verdict references unknown document {d!r}")
            if r:
                succ[d] = succ.get(d, 0) + 1
            else:
                fail[d] = fail.get(d, 0) + 1
        trace.record(t, phase, batch, verdict)
        if t <= Tf:
            if t % tau == 0 or t == Tf:
                flush(t)
        elif (t - Tf) % tau == 0:
            flush(t)
        if t in snaps:
            trace.snapshot(t, table)
    if succ or fail:
        flush(T + 1)
    return final_ranking(table), trace


def _heap_sift_down(heap: list[str], i: int, size: int, judge: JudgeFn, trace: RunTrace) -> None:
    while True:
        left = 2 * i + 1
        if left >= size:
            return
        kids = [left] + ([left + 1] if left + 1 < size else [])
        slots = [i] + kids
        batch = Batch([heap[j] for j in slots], trace.judge_calls + 1)
        verdict = _judge(judge, batch, batch.round, trace)
        trace.record(batch.round, HEAPIFY, batch, verdict)
        # first member judged relevant wins; the parent keeps its place otherwise
        winner = next((j for j in slots if verdict.bits[heap[j]]), i)
        if winner == i:
            return
        heap[i], heap[winner] = heap[winner], heap[i]
        i = winner


def run_heapify(candidates, judge: JudgeFn, top_k: int) -> tuple[list[str], RunTrace]:
    ids = _ids(candidates)
    n = len(ids)
    if not 0 <= top_k <= n:
        raise ValueError(f"top_k={top_k} outside [0, {n}]")
    heap = list(ids)
    trace = RunTrace()
    for i in range(n // 2 - 1, -1, -1):
        _heap_sift_down(heap, i, n, judge, trace)
    size = n
    extracted: list[str] = []
    for _ in range(top_k):
        extracted.append(heap[0])
        size -= 1
        heap[0] = heap[size]
        _heap_sift_down(heap, 0, size, judge, trace)
    chosen = set(extracted)
    return extracted + [d for d in ids if d not in chosen], trace


def heapify_call_bound(n: int, top_k: int) -> int:
    """Worst-case judge calls for ``run_heapify``: every sift-down reaches a leaf."""
    build = 0
    for i in range(n // 2):
        j = i
        while 2 * j + 1 < n:
            build += 1
            j = 2 * j + 1
    extract = sum(size.bit_length() - 1 for size in range(n - 1, n - 1 - top_k, -1) if size >= 2)
    return build + extract


def surrogate_optimal_batch(truth: Mapping[str, float], b: int) -> float:
    vals = sorted(truth.values(), reverse=True)
    if b > len(vals):
        raise ValueError(f"b={b} exceeds the {len(vals)} documents in truth")
    return float(sum(vals[:b]))

