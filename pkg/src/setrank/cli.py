"""Command-line entry point: ``setrank {index,retrieve,rerank,rq1,rq3,report,synth}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import harness, metrics
from .retrieval import build_index, ingest_corpus, load_queries, retrieve_top_n, write_candidates_tsv


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config; flags below override its fields")
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--k1", type=float)
    p.add_argument("--b-len", type=float)
    p.add_argument("--n-cap", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--snapshot-rounds", type=int, nargs="+")
    p.add_argument("--output-dir")
    p.add_argument("--judge-model", help="simulated judge model file (JSON or YAML)")
    p.add_argument("--judge-endpoint", help="remote judge URL (default: $%s)" % harness.ENDPOINT_ENV)


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    for flag, attr in [("corpus", "corpus"), ("queries", "queries"), ("qrels", "qrels"), ("k1", "k1"),
                       ("b_len", "b_len"), ("n_cap", "n_cap"), ("seeds", "seeds"),
                       ("snapshot_rounds", "snapshot_rounds"), ("output_dir", "output_dir")]:
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, attr, val)
    if getattr(args, "judge_model", None):
        cfg.judge = {"simulated": args.judge_model}
    elif getattr(args, "judge_endpoint", None):
        cfg.judge = {"remote": args.judge_endpoint}
    return cfg


def cmd_index(args) -> int:
    corpus = ingest_corpus(args.corpus)
    index = build_index(corpus, args.k1, args.b_len)
    print(json.dumps({"documents": index.n_docs, "terms": len(index.postings), "avgdl": round(index.avgdl, 4)}))
    return 0


def cmd_retrieve(args) -> int:
    corpus = ingest_corpus(args.corpus)
    index = build_index(corpus, args.k1, args.b_len)
    queries = load_queries(args.queries)
    lists = [retrieve_top_n(index, text, args.n_cap, qid) for qid, text in sorted(queries.items())]
    out = write_candidates_tsv(lists)
    if args.out:
        Path(args.out).write_text(out)
    else:
        sys.stdout.write(out)
    return 0


def cmd_rerank(args) -> int:
    cfg = _config(args)
    if not cfg.policies:
        cfg.policies = harness.default_grid()
    agg = harness.run_experiment(cfg)
    _print_summary(Path(cfg.output_dir) / "summary.csv")
    if agg.failures:
        print(f"{len(agg.failures)} failed cells; see {cfg.output_dir}/failures.json", file=sys.stderr)
    return 0


def cmd_rq1(args) -> int:
    cfg = _config(args)
    ds = harness.load_dataset(cfg)
    factory = harness.make_judge_factory(cfg.judge, ds)
    results = [harness.rq1_variance_experiment(ds, factory, b, args.trials, cfg.seeds[0], cfg.n_cap)
               for b in args.batch_sizes]
    paths = harness.write_rq1(results, cfg.output_dir)
    for res in results:
        for s in res.stats:
            print(f"b={res.batch_size:<3d} {s.regime:<11s} accuracy={s.mean_accuracy:.3f} "
                  f"variance={s.mean_per_query_variance:.4f}")
        print(f"b={res.batch_size:<3d} ordering holds on {res.ordering_rate():.0%} of queries")
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def cmd_rq3(args) -> int:
    cfg = _config(args)
    ds = harness.load_dataset(cfg)
    factory = harness.make_judge_factory(cfg.judge, ds)
    curve = harness.rq3_convergence_sweep(ds, factory, args.max_calls, cfg.seeds, args.step, args.batch_size,
                                          cfg.n_cap)
    out = Path(cfg.output_dir) / "curves"
    out.mkdir(parents=True, exist_ok=True)
    (out / "rq3_uniform.csv").write_text(curve.to_csv())
    sys.stdout.write(curve.to_csv())
    print(f"plateau (gain per {args.window} calls < {args.tol}): {curve.plateau(args.window, args.tol)}")
    return 0


def _print_summary(path: Path) -> None:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        print(f"{r['policy']:<12s} t={r['snapshot']:<6s} nDCG@10 {float(r['mean']):.3f} ± {float(r['std']):.3f}")


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if (run / "summary.csv").exists():
        _print_summary(run / "summary.csv")
    if (run / "rq1_regimes.csv").exists():
        sys.stdout.write((run / "rq1_regimes.csv").read_text())
        sys.stdout.write((run / "rq1_shares.csv").read_text())
    if (run / "manifest.json").exists():
        print((run / "manifest.json").read_text().strip())
    if args.reference_shares:
        # shares for a reference set of regime variances at b=2 and b=10
        for b, (vi, vp, vt) in {2: (0.063, 0.076, 0.083), 10: (0.062, 0.103, 0.113)}.items():
            pos, comp = metrics.contextual_share({"intrinsic": vi, "positional": vp, "total": vt})
            print(f"b={b}: positional {pos:.3f} compositional {comp:.3f} contextual {pos + comp:.3f}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_instance

    inst = make_instance(args.n_queries, args.seed)
    paths = inst.write(args.out, args.preset, args.judge_seed)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setrank", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a BM25 index and print its statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k1", type=float, default=1.5)
    p.add_argument("--b-len", type=float, default=0.75)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="write top-N BM25 candidates as TSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--n-cap", type=int, default=100)
    p.add_argument("--k1", type=float, default=1.5)
    p.add_argument("--b-len", type=float, default=0.75)
    p.add_argument("--out")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("rerank", help="run the policy grid and aggregate nDCG@10")
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("rq1", help="judgment variance under intrinsic/positional/total regimes")
    _add_dataset_flags(p)
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[2, 10])
    p.add_argument("--trials", type=int, default=30)
    p.set_defaults(func=cmd_rq1)

    p = sub.add_parser("rq3", help="nDCG@10 of uniform sampling versus judge calls")
    _add_dataset_flags(p)
    p.add_argument("--max-calls", type=int, default=600)
    p.add_argument("--step", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--tol", type=float, default=0.005)
    p.set_defaults(func=cmd_rq3)

    p = sub.add_parser("report", help="print the tables of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--reference-shares", action="store_true", help="also print variance shares for the reference regime variances")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write the synthetic benchmark instance")
    p.add_argument("--out", required=True)
    p.add_argument("--n-queries", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--preset", default="contextual", choices=["off", "contextual", "sharp"])
    p.add_argument("--judge-seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
