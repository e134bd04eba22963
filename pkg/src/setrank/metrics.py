"""Ranking metrics, surrogate regret, F-beta, and judgment-variance statistics."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

INTRINSIC = "intrinsic"
POSITIONAL = "positional"
TOTAL = "total"
REGIMES = (INTRINSIC, POSITIONAL, TOTAL)


@dataclass
class Qrels:
    judgments: dict[tuple[str, str], int] = field(default_factory=dict)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.judgments.get((query_id, doc_id), 0)

    def for_query(self, query_id: str) -> dict[str, int]:
        return {d: g for (q, d), g in self.judgments.items() if q == query_id}

    def relevant(self, query_id: str) -> list[str]:
        return sorted(d for d, g in self.for_query(query_id).items() if g > 0)

    @property
    def query_ids(self) -> list[str]:
        return sorted({q for q, _ in self.judgments})

    @classmethod
    def from_mapping(cls, m: Mapping[str, Mapping[str, int]]) -> "Qrels":
        out = cls()
        for q, docs in m.items():
            for d, g in docs.items():
                if g < 0:
                    raise ValueError(f"negative grade for ({q}, {d})")
                out.judgments[(q, d)] = int(g)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "Qrels":
        """Read a ``query-id<TAB>corpus-id<TAB>score`` file with a header row."""
        out = cls()
        with open(path, encoding="utf-8") as f:
            rows = list(csv.reader(f, delimiter="\t"))
        for lineno, row in enumerate(rows[1:], 2):
            if not row:
                continue
            if len(row) < 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            grade = int(row[2])
            if grade < 0:
                raise ValueError(f"{path}:{lineno}: negative relevance grade")
            out.judgments[(row[0], row[1])] = grade
        return out

    def to_tsv(self) -> str:
        lines = ["query-id\tcorpus-id\tscore"]
        lines += [f"{q}\t{d}\t{g}" for (q, d), g in sorted(self.judgments.items())]
        return "\n".join(lines) + "\n"


def _dcg(gains: Sequence[float]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(ranking: Sequence[str], qrels: Qrels, query: str, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    judged = qrels.for_query(query)
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
    idcg = _dcg(ideal)
    if idcg == 0.0:
        return 0.0
    return _dcg([judged.get(d, 0) for d in ranking[:k]]) / idcg


def cumulative_regret(trace, truth: Mapping[str, float], b: int) -> np.ndarray:
    """Running sum of (best top-b theta sum) - (theta sum of the chosen batch)."""
    best = sum(sorted(truth.values(), reverse=True)[:b])
    inst = []
    for rec in trace.records:
        ids = rec.batch.doc_ids
        if len(ids) != b:
            raise ValueError(f"round {rec.round}: batch size {len(ids)} != {b}")
        inst.append(best - sum(truth[d] for d in ids))
    return np.cumsum(np.array(inst, dtype=float))


def f_beta(predicted: Iterable[str], gold: Iterable[str], beta: float = 2.0) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred, gold = set(predicted), set(gold)
    if not pred or not gold:
        return 0.0
    hit = len(pred & gold)
    p, r = hit / len(pred), hit / len(gold)
    if p == 0 and r == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * p * r / (b2 * p + r)


def accuracy(outcomes: Sequence[int]) -> float:
    return float(np.mean(outcomes)) if len(outcomes) else 0.0


@dataclass
class RegimeStats:
    regime: str
    mean_accuracy: float
    mean_per_query_variance: float
    n_queries: int = 0
    excluded: list[str] = field(default_factory=list)


def variance_decomposition(trials: Mapping[str, Mapping[str, Sequence[int]]]) -> list[RegimeStats]:
    """Per-regime averages of per-query accuracy and population variance.

    ``trials[regime][query_id]`` is the list of 0/1 outcomes for that query.
    Queries with fewer than two outcomes are left out and listed in ``excluded``.
    """
    out = []
    for regime in [r for r in REGIMES if r in trials] + [r for r in trials if r not in REGIMES]:
        accs, vars_, excluded = [], [], []
        for q, bits in trials[regime].items():
            if len(bits) < 2:
                excluded.append(q)
                continue
            arr = np.asarray(bits, dtype=float)
            accs.append(arr.mean())
            vars_.append(arr.var())  # population variance (ddof=0)
        out.append(RegimeStats(
            regime,
            float(np.mean(accs)) if accs else float("nan"),
            float(np.mean(vars_)) if vars_ else float("nan"),
            len(accs),
            excluded,
        ))
    return out


def per_query_variances(trials: Mapping[str, Mapping[str, Sequence[int]]]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = defaultdict(dict)
    for regime, per_q in trials.items():
        for q, bits in per_q.items():
            if len(bits) >= 2:
                out[q][regime] = float(np.var(np.asarray(bits, dtype=float)))
    return dict(out)


def contextual_share(stats: Sequence[RegimeStats] | Mapping[str, float]) -> tuple[float, float]:
    """(positional share, compositional share) of the total variance.

    A heuristic split from regime differences; the sources are not independent.
    """
    if isinstance(stats, Mapping):
        var = dict(stats)
    else:
        var = {s.regime: s.mean_per_query_variance for s in stats}
    missing = [r for r in REGIMES if r not in var]
    if missing:
        raise ValueError(f"missing regimes: {missing}")
    total = var[TOTAL]
    if total == 0:
        raise ZeroDivisionError("total variance is zero; shares are undefined")
    return (var[POSITIONAL] - var[INTRINSIC]) / total, (var[TOTAL] - var[POSITIONAL]) / total


def metrics_csv(rows: Iterable[tuple[str, str, int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "metric", "k", "value"])
    for q, m, k, v in rows:
        w.writerow([q, m, k, repr(float(v))])
    return buf.getvalue()


def regime_table_csv(stats: Sequence[RegimeStats], batch_size: int | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch_size", "regime", "accuracy", "variance", "n_queries"])
    for s in stats:
        w.writerow([batch_size if batch_size is not None else "", s.regime,
                    f"{s.mean_accuracy:.6f}", f"{s.mean_per_query_variance:.6f}", s.n_queries])
    return buf.getvalue()
