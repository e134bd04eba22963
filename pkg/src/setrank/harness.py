"""Configuration-driven experiment runner.

Wires retrieval -> policy -> judge -> metrics for every (query, policy, seed)
cell, aggregates nDCG@10 across queries and then across seeds, and writes
summary tables, curves, traces and a manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics
from .judge import (Batch, JudgeVerdict, RemoteJudge, SimulatedJudge, SimulatedJudgeModel, bind)
from .policy import PolicyAborted, PolicyConfig, RunTrace, run_heapify, run_ts_setrank, run_ts_setrank_t
from .retrieval import (DEFAULT_B_LEN, DEFAULT_K1, DEFAULT_N_CAP, CandidateList, Corpus, InvertedIndex,
                        build_index, ingest_corpus, load_queries, retrieve_top_n)

log = logging.getLogger(__name__)

ENDPOINT_ENV = "SETRANK_JUDGE_ENDPOINT"
API_KEY_ENV = "SETRANK_JUDGE_API_KEY"

_TS_NAME = re.compile(r"^TS-(\d+)/(\d+)$")


@dataclass
class PolicySpec:
    name: str
    T: int = 100
    T_f: int | None = None
    b: int = 10
    tau: int = 1
    top_k: int = 10  # heapify only

    @property
    def kind(self) -> str:
        low = self.name.lower()
        if low == "heapify":
            return "heapify"
        if low.startswith("ts-t") or self.tau > 1:
            return "ts_t"
        return "ts"

    def explore_rounds(self) -> int:
        if self.T_f is not None:
            return self.T_f
        if self.name.lower() == "uniform":
            return self.T
        m = _TS_NAME.match(self.name)
        if m:
            # TS-a/(100-a): a% of the budget on uniform exploration
            a, rest = int(m.group(1)), int(m.group(2))
            return round(self.T * a / (a + rest))
        raise ValueError(f"policy {self.name!r} needs an explicit T_f")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicySpec":
        known = {"name", "T", "T_f", "b", "tau", "top_k"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown policy fields: {sorted(extra)}")
        return cls(**dict(d))


def default_grid(T: int = 100, b: int = 10) -> list[PolicySpec]:
    """Uniform plus the four exploration splits TS-75/25 ... TS-0/100."""
    names = ["Uniform", "TS-75/25", "TS-50/50", "TS-25/75", "TS-0/100"]
    return [PolicySpec(n, T=T, b=b) for n in names]


@dataclass
class ExperimentConfig:
    corpus: str = ""
    queries: str = ""
    qrels: str = ""
    k1: float = DEFAULT_K1
    b_len: float = DEFAULT_B_LEN
    n_cap: int = DEFAULT_N_CAP
    policies: list[PolicySpec] = field(default_factory=list)
    judge: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    snapshot_rounds: list[int] = field(default_factory=lambda: [50, 100])
    output_dir: str = "runs/default"
    query_sample: int | None = None
    query_sample_seed: int = 0

    def __post_init__(self):
        self.policies = [p if isinstance(p, PolicySpec) else PolicySpec.from_dict(p) for p in self.policies]

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.policies:
            raise ValueError("at least one policy is required")
        for p in self.policies:
            if p.kind != "heapify":
                too_late = [t for t in self.snapshot_rounds if t > p.T]
                if too_late:
                    raise ValueError(f"snapshot rounds {too_late} exceed T={p.T} of {p.name}")
                PolicyConfig(p.T, p.explore_rounds(), p.b, p.tau)

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        cfg = cls(**dict(d))
        if base_dir is not None:
            base = Path(base_dir)
            for key in ("corpus", "queries", "qrels", "output_dir"):
                val = getattr(cfg, key)
                if val and not Path(val).is_absolute():
                    setattr(cfg, key, str(base / val))
            sim = cfg.judge.get("simulated")
            if sim and not Path(sim).is_absolute():
                cfg.judge["simulated"] = str(base / sim)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        import yaml

        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data, Path(path).parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policies"] = [asdict(p) for p in self.policies]
        return d

    def config_hash(self) -> str:
        # where results go does not change them
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def derive_seed(*parts) -> np.random.SeedSequence:
    """Stable stream for one (seed, query, policy, seed index) cell."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return np.random.SeedSequence(int.from_bytes(digest[:16], "little"))


def cell_streams(seed: int, query_id: str, policy: str, seed_index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(policy rng, judge rng) for one cell."""
    policy_ss, judge_ss = derive_seed(seed, query_id, policy, seed_index).spawn(2)
    return np.random.default_rng(policy_ss), np.random.default_rng(judge_ss)


# --------------------------------------------------------------------------
# dataset + judge plumbing


@dataclass
class Dataset:
    corpus: Corpus
    queries: dict[str, str]
    qrels: metrics.Qrels
    index: InvertedIndex | None = None

    def candidates(self, query_id: str, n_cap: int) -> CandidateList:
        assert self.index is not None
        return retrieve_top_n(self.index, self.queries[query_id], n_cap, query_id)


def dataset_from_instance(instance, k1: float = DEFAULT_K1, b_len: float = DEFAULT_B_LEN) -> Dataset:
    """Wrap an in-memory synthetic instance (see ``setrank.synthetic``)."""
    return Dataset(instance.corpus, dict(instance.queries), instance.qrels, build_index(instance.corpus, k1, b_len))


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    corpus = ingest_corpus(cfg.corpus)
    queries = load_queries(cfg.queries)
    qrels = metrics.Qrels.load(cfg.qrels)
    ds = Dataset(corpus, queries, qrels, build_index(corpus, cfg.k1, cfg.b_len))
    if cfg.query_sample is not None and cfg.query_sample < len(queries):
        rng = np.random.default_rng(cfg.query_sample_seed)
        keep = sorted(rng.choice(sorted(queries), size=cfg.query_sample, replace=False).tolist())
        ds.queries = {q: queries[q] for q in keep}
    return ds


JudgeFactory = Callable[[str, np.random.Generator], Callable[[Batch], JudgeVerdict]]


def make_judge_factory(spec: Mapping, dataset: Dataset | None = None) -> JudgeFactory:
    """Return ``factory(query_id, rng) -> judge(batch)`` for the configured judge."""
    if "simulated" in spec:
        model = spec["simulated"]
        if not isinstance(model, SimulatedJudgeModel):
            model = SimulatedJudgeModel.load(model) if isinstance(model, (str, Path)) else SimulatedJudgeModel.from_dict(model)

        def sim_factory(query_id: str, rng: np.random.Generator):
            return bind(SimulatedJudge(model, rng))

        return sim_factory
    if "remote" in spec or os.environ.get(ENDPOINT_ENV):
        endpoint = spec.get("remote") or os.environ[ENDPOINT_ENV]
        judge = RemoteJudge(endpoint, float(spec.get("timeout", 60.0)), int(spec.get("retries", 2)),
                            os.environ.get(API_KEY_ENV))
        docs = dataset.corpus.docs if dataset is not None else None

        def remote_factory(query_id: str, rng: np.random.Generator):
            query = dataset.queries[query_id] if dataset is not None else ""
            return bind(judge, query, docs)

        return remote_factory
    raise ValueError("judge spec needs 'simulated' (model path or mapping) or 'remote' (endpoint)")


def run_policy(spec: PolicySpec, candidates, judge, rng: np.random.Generator,
               snapshot_rounds: Sequence[int]) -> tuple[list[str], RunTrace]:
    if spec.kind == "heapify":
        return run_heapify(candidates, judge, min(spec.top_k, len(candidates)))
    cfg = PolicyConfig(spec.T, spec.explore_rounds(), min(spec.b, len(candidates)), spec.tau)
    run = run_ts_setrank_t if spec.kind == "ts_t" else run_ts_setrank
    return run(candidates, judge, cfg, snapshot_rounds, rng=rng)


# --------------------------------------------------------------------------
# policy grid sweep


FINAL = "final"


@dataclass
class CellResult:
    query_id: str
    policy: str
    seed: int
    ndcg: dict[str, float]
    judge_calls: int
    trace: RunTrace | None = None


@dataclass
class AggregateResult:
    summary: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    per_seed: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    judge_calls: dict[str, int] = field(default_factory=dict)
    cells: list[CellResult] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    config: ExperimentConfig | None = None
    curves: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def mean(self, policy: str, snapshot) -> float:
        return self.summary[(policy, str(snapshot))][0]

    def std(self, policy: str, snapshot) -> float:
        return self.summary[(policy, str(snapshot))][1]


def _check_writable(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise PermissionError(f"output directory {out} is not writable: {e}") from e
    return out


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None, judge_factory: JudgeFactory | None = None,
                   write: bool = True, keep_traces: bool = True) -> AggregateResult:
    cfg.validate()
    if write:
        _check_writable(cfg.output_dir)
    dataset = dataset if dataset is not None else load_dataset(cfg)
    if dataset.index is None:
        dataset.index = build_index(dataset.corpus, cfg.k1, cfg.b_len)
    judge_factory = judge_factory or make_judge_factory(cfg.judge, dataset)

    agg = AggregateResult(config=cfg)
    query_ids = sorted(dataset.queries)
    candidates = {q: dataset.candidates(q, cfg.n_cap) for q in query_ids}

    for spec in cfg.policies:
        agg.judge_calls[spec.name] = 0
        labels = [FINAL] if spec.kind == "heapify" else [str(t) for t in sorted(cfg.snapshot_rounds)]
        for si, seed in enumerate(cfg.seeds):
            per_label: dict[str, list[float]] = {lab: [] for lab in labels}
            for q in query_ids:
                cands = candidates[q]
                if len(cands) == 0:
                    agg.failures.append({"query_id": q, "policy": spec.name, "seed": seed,
                                         "error": "first-stage retrieval returned no candidates"})
                    continue
                policy_rng, judge_rng = cell_streams(seed, q, spec.name, si)
                try:
                    judge = judge_factory(q, judge_rng)
                    ranking, trace = run_policy(spec, cands, judge, policy_rng, cfg.snapshot_rounds)
                except PolicyAborted as e:
                    agg.judge_calls[spec.name] += e.trace.judge_calls
                    agg.failures.append({"query_id": q, "policy": spec.name, "seed": seed,
                                         "round": e.round, "error": str(e)})
                    continue
                except Exception as e:  # one bad cell must not void the sweep
                    agg.failures.append({"query_id": q, "policy": spec.name, "seed": seed, "error": repr(e)})
                    continue
                agg.judge_calls[spec.name] += trace.judge_calls
                if spec.kind == "heapify":
                    scores = {FINAL: metrics.ndcg_at_k(ranking, dataset.qrels, q, 10)}
                else:
                    scores = {str(t): metrics.ndcg_at_k(trace.snapshots[t], dataset.qrels, q, 10)
                              for t in cfg.snapshot_rounds}
                for lab, v in scores.items():
                    per_label[lab].append(v)
                agg.cells.append(CellResult(q, spec.name, seed, scores, trace.judge_calls,
                                            trace if keep_traces else None))
            for lab in labels:
                if per_label[lab]:
                    agg.per_seed.setdefault((spec.name, lab), []).append(float(np.mean(per_label[lab])))
        for lab in labels:
            vals = agg.per_seed.get((spec.name, lab))
            if vals:
                # population std across per-seed means
                agg.summary[(spec.name, lab)] = (float(np.mean(vals)), float(np.std(vals)))
        if spec.kind != "heapify":
            agg.curves[spec.name] = [(int(lab), agg.summary[(spec.name, lab)][0])
                                     for lab in labels if (spec.name, lab) in agg.summary]
    if write:
        emit_results(agg, cfg.output_dir)
    return agg


def emit_results(agg: AggregateResult, out_dir: str | Path, timestamp: bool = True) -> list[Path]:
    out = _check_writable(out_dir)
    written: list[Path] = []
    cfg = agg.config
    if agg.summary:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "snapshot", "mean", "std"])
        order = [p.name for p in cfg.policies] if cfg else sorted({p for p, _ in agg.summary})
        for pol in order:
            for (p, lab), (m, s) in agg.summary.items():
                if p == pol:
                    w.writerow([p, lab, f"{m:.6f}", f"{s:.6f}"])
        (out / "summary.csv").write_text(buf.getvalue())
        written.append(out / "summary.csv")

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "judge_calls"])
        for pol, n in agg.judge_calls.items():
            w.writerow([pol, n])
        (out / "judge_calls.csv").write_text(buf.getvalue())
        written.append(out / "judge_calls.csv")

        (out / "metrics.csv").write_text(_per_cell_metrics_csv(agg))
        written.append(out / "metrics.csv")
    if agg.curves:
        (out / "curves").mkdir(exist_ok=True)
        for pol, curve in agg.curves.items():
            path = out / "curves" / f"{_slug(pol)}.csv"
            path.write_text("calls,mean_ndcg@10\n" + "".join(f"{t},{v:.6f}\n" for t, v in curve))
            written.append(path)
    traced = [c for c in agg.cells if c.trace is not None]
    if traced:
        (out / "traces").mkdir(exist_ok=True)
        for c in traced:
            path = out / "traces" / f"{_slug(c.policy)}__{c.query_id}__seed{c.seed}.jsonl"
            path.write_text(c.trace.to_jsonl())
            written.append(path)
    if agg.failures:
        (out / "failures.json").write_text(json.dumps(agg.failures, indent=1, sort_keys=True) + "\n")
        written.append(out / "failures.json")
    manifest = {
        "config_hash": cfg.config_hash() if cfg else None,
        "seeds": list(cfg.seeds) if cfg else [],
        "policies": [p.name for p in cfg.policies] if cfg else [],
        "n_failures": len(agg.failures),
    }
    if timestamp:
        manifest["created"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    written.append(out / "manifest.json")
    return written


def _per_cell_metrics_csv(agg: AggregateResult) -> str:
    rows = []
    for c in agg.cells:
        for lab, v in c.ndcg.items():
            rows.append((c.query_id, f"ndcg@10/{c.policy}/seed{c.seed}/t={lab}", 10, v))
    return metrics.metrics_csv(rows)


def _slug(name: str) -> str:
    return re.sub(r"[^0-9A-Za-z]+", "_", name).strip("_")


# --------------------------------------------------------------------------
# RQ1: judgment variance under three batch regimes


@dataclass
class RQ1Result:
    batch_size: int
    stats: list[metrics.RegimeStats]
    outcomes: dict[str, dict[str, list[int]]]
    skipped: list[str] = field(default_factory=list)

    @property
    def per_query(self) -> dict[str, dict[str, float]]:
        return metrics.per_query_variances(self.outcomes)

    def ordering_rate(self) -> float:
        """Fraction of queries with intrinsic <= positional <= total variance."""
        pq = self.per_query
        full = [v for v in pq.values() if all(r in v for r in metrics.REGIMES)]
        if not full:
            return float("nan")
        ok = sum(1 for v in full
                 if v[metrics.INTRINSIC] <= v[metrics.POSITIONAL] <= v[metrics.TOTAL])
        return ok / len(full)


def rq1_variance_experiment(dataset: Dataset, judge_factory: JudgeFactory, batch_size: int = 10,
                            trials: int = 30, seed: int = 0, n_cap: int = DEFAULT_N_CAP) -> RQ1Result:
    """Judge one relevant passage d+ in ``trials`` batches under each regime.

    intrinsic:  one fixed batch, fixed order, judged repeatedly
    positional: the same members, reshuffled each trial
    total:      distractors redrawn and order reshuffled each trial
    """
    outcomes: dict[str, dict[str, list[int]]] = {r: {} for r in metrics.REGIMES}
    skipped: list[str] = []
    for q in sorted(dataset.queries):
        cands = dataset.candidates(q, n_cap).doc_ids
        relevant = [d for d in cands if dataset.qrels.grade(q, d) > 0]
        if not relevant or len(cands) < batch_size:
            skipped.append(q)
            continue
        rng = np.random.default_rng(derive_seed(seed, q, "rq1", batch_size))
        d_plus = relevant[int(rng.integers(len(relevant)))]
        others = [d for d in cands if d != d_plus]

        def draw_batch() -> list[str]:
            members = [d_plus] + [others[i] for i in rng.choice(len(others), size=batch_size - 1, replace=False)]
            return [members[i] for i in rng.permutation(batch_size)]

        fixed = draw_batch()
        for regime in metrics.REGIMES:
            _, judge_rng = cell_streams(seed, q, f"rq1-{regime}", batch_size)
            judge = judge_factory(q, judge_rng)
            bits = []
            for _ in range(trials):
                if regime == metrics.INTRINSIC:
                    ids = fixed
                elif regime == metrics.POSITIONAL:
                    ids = [fixed[i] for i in rng.permutation(batch_size)]
                else:
                    ids = draw_batch()
                bits.append(int(judge(Batch(ids)).bits[d_plus]))
            outcomes[regime][q] = bits
    stats = metrics.variance_decomposition(outcomes)
    return RQ1Result(batch_size, stats, outcomes, skipped)


def write_rq1(results: Sequence[RQ1Result], out_dir: str | Path) -> list[Path]:
    out = _check_writable(out_dir)
    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(["batch_size", "regime", "accuracy", "variance", "n_queries"])
    shares = io.StringIO()
    ws = csv.writer(shares, lineterminator="\n")
    ws.writerow(["batch_size", "positional_share", "compositional_share", "contextual_share", "variance"])
    perq = io.StringIO()
    wq = csv.writer(perq, lineterminator="\n")
    wq.writerow(["batch_size", "query_id", "regime", "accuracy", "variance"])
    for res in results:
        for s in res.stats:
            w.writerow([res.batch_size, s.regime, f"{s.mean_accuracy:.6f}", f"{s.mean_per_query_variance:.6f}",
                        s.n_queries])
        try:
            pos, comp = metrics.contextual_share(res.stats)
            ws.writerow([res.batch_size, f"{pos:.6f}", f"{comp:.6f}", f"{pos + comp:.6f}", "population"])
        except (ValueError, ZeroDivisionError):
            ws.writerow([res.batch_size, "undefined", "undefined", "undefined", "population"])
        for regime, per_q in res.outcomes.items():
            for q, bits in per_q.items():
                arr = np.asarray(bits, dtype=float)
                wq.writerow([res.batch_size, q, regime, f"{arr.mean():.6f}", f"{arr.var():.6f}"])
    paths = [out / "rq1_regimes.csv", out / "rq1_shares.csv", out / "rq1_per_query.csv"]
    for p, buf in zip(paths, (table, shares, perq)):
        p.write_text(buf.getvalue())
    skipped = {res.batch_size: res.skipped for res in results if res.skipped}
    if skipped:
        p = out / "rq1_skipped.json"
        p.write_text(json.dumps(skipped, indent=1) + "\n")
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# RQ3: uniform-sampling convergence


@dataclass
class ConvergenceCurve:
    points: list[tuple[int, float]]

    def marginal_gain(self, at: int, window: int = 50) -> float:
        lookup = dict(self.points)
        return lookup[at + window] - lookup[at]

    def plateau(self, window: int = 50, tol: float = 0.005) -> int | None:
        """First call count whose gain over the next ``window`` calls is below ``tol``."""
        lookup = dict(self.points)
        for c, v in self.points:
            if c + window in lookup and lookup[c + window] - v < tol:
                return c
        return None

    def to_csv(self) -> str:
        return "calls,mean_ndcg@10\n" + "".join(f"{c},{v:.6f}\n" for c, v in self.points)


def rq3_convergence_sweep(dataset: Dataset, judge_factory: JudgeFactory, max_calls: int, seeds: Sequence[int],
                          step: int = 25, batch_size: int = 10, n_cap: int = DEFAULT_N_CAP) -> ConvergenceCurve:
    grid = sorted(set(range(0, max_calls + 1, step)) | {max_calls})
    spec = PolicySpec("Uniform", T=max_calls, T_f=max_calls, b=batch_size)
    sums = {c: [] for c in grid}
    for si, seed in enumerate(seeds):
        per_q = {c: [] for c in grid}
        for q in sorted(dataset.queries):
            cands = dataset.candidates(q, n_cap)
            if len(cands) == 0:
                continue
            policy_rng, judge_rng = cell_streams(seed, q, "rq3-uniform", si)
            judge = judge_factory(q, judge_rng)
            _, trace = run_policy(spec, cands, judge, policy_rng, grid)
            for c in grid:
                per_q[c].append(metrics.ndcg_at_k(trace.snapshots[c], dataset.qrels, q, 10))
        for c in grid:
            if per_q[c]:
                sums[c].append(float(np.mean(per_q[c])))
    return ConvergenceCurve([(c, float(np.mean(sums[c]))) for c in grid if sums[c]])
