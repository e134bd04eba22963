import json
import os

import numpy as np
import pytest

from setrank import cli, harness
from setrank.harness import AggregateResult, ExperimentConfig, PolicySpec
from setrank.judge import JudgeVerdict, SimulatedJudgeModel
from setrank.metrics import Qrels, ndcg_at_k
from setrank.synthetic import make_instance


@pytest.fixture(scope="module")
def small():
    inst = make_instance(n_queries=3, seed=1)
    return inst, harness.dataset_from_instance(inst)


def noiseless_factory(inst):
    """Judge bits are the qrels grades: perfect evidence."""
    rel = {d for (q, d), g in inst.qrels.judgments.items() if g > 0}

    def factory(query_id, rng):
        return lambda batch: JudgeVerdict({d: int(d in rel) for d in batch.doc_ids})
    return factory


def sim_factory(inst, preset):
    return harness.make_judge_factory({"simulated": inst.judge_model(preset)})


def cfg_for(tmp_path, policies, **kw):
    kw.setdefault("seeds", [0])
    kw.setdefault("snapshot_rounds", [50, 100])
    return ExperimentConfig(policies=policies, output_dir=str(tmp_path / "out"), **kw)


class TestPolicySpec:
    def test_grid_names(self):
        grid = harness.default_grid()
        assert [p.name for p in grid] == ["Uniform", "TS-75/25", "TS-50/50", "TS-25/75", "TS-0/100"]
        assert [p.explore_rounds() for p in grid] == [100, 75, 50, 25, 0]

    def test_kinds(self):
        assert PolicySpec("Heapify").kind == "heapify"
        assert PolicySpec("TS-T-25/75", T_f=25, tau=5).kind == "ts_t"
        assert PolicySpec("TS-50/50").kind == "ts"

    def test_unnamed_needs_tf(self):
        with pytest.raises(ValueError):
            PolicySpec("custom").explore_rounds()


class TestConfig:
    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            cfg_for(tmp_path, []).validate()
        with pytest.raises(ValueError):
            cfg_for(tmp_path, [PolicySpec("Uniform")], seeds=[]).validate()
        with pytest.raises(ValueError):
            cfg_for(tmp_path, [PolicySpec("Uniform", T=40)]).validate()

    def test_yaml_load_resolves_paths(self, tmp_path):
        (tmp_path / "c.yaml").write_text(
            "corpus: corpus.jsonl\nqueries: q.jsonl\nqrels: qrels.tsv\n"
            "policies:\n  - {name: Uniform, T: 10}\njudge: {simulated: judge.json}\nseeds: [3]\n"
            "snapshot_rounds: [10]\noutput_dir: out\n")
        cfg = ExperimentConfig.load(tmp_path / "c.yaml")
        assert cfg.corpus == str(tmp_path / "corpus.jsonl")
        assert cfg.judge["simulated"] == str(tmp_path / "judge.json")
        assert cfg.policies[0] == PolicySpec("Uniform", T=10)
        assert cfg.seeds == [3]

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="unknown"):
            ExperimentConfig.from_dict({"sedes": [1]})

    def test_hash_stable(self, tmp_path):
        a = cfg_for(tmp_path, harness.default_grid())
        b = cfg_for(tmp_path, harness.default_grid())
        assert a.config_hash() == b.config_hash()
        b.seeds = [1]
        assert a.config_hash() != b.config_hash()
        b.seeds, b.output_dir = [0], "elsewhere"
        assert a.config_hash() == b.config_hash()


class TestStreams:
    def test_cells_independent_and_repeatable(self):
        a1, j1 = harness.cell_streams(0, "q1", "Uniform", 0)
        a2, j2 = harness.cell_streams(0, "q1", "Uniform", 0)
        assert a1.random() == a2.random() and j1.random() == j2.random()
        b1, _ = harness.cell_streams(0, "q2", "Uniform", 0)
        c1, _ = harness.cell_streams(0, "q1", "TS-0/100", 0)
        x = harness.cell_streams(0, "q1", "Uniform", 0)[0].random()
        assert len({x, b1.random(), c1.random()}) == 3


class TestRunExperiment:
    def test_perfect_evidence(self, small, tmp_path):
        inst, ds = small
        cfg = cfg_for(tmp_path, [PolicySpec("Uniform", T=300)], snapshot_rounds=[300])
        agg = harness.run_experiment(cfg, ds, noiseless_factory(inst))
        assert agg.mean("Uniform", 300) == 1.0
        assert agg.std("Uniform", 300) == 0.0

    def test_rerun_byte_identical(self, small, tmp_path):
        inst, ds = small
        pols = [PolicySpec("TS-50/50", T=30), PolicySpec("TS-T-50/50", T=30, T_f=15, tau=4), PolicySpec("Heapify")]
        outs = []
        for name in ("a", "b"):
            cfg = ExperimentConfig(policies=pols, seeds=[0, 1], snapshot_rounds=[0, 15, 30],
                                   output_dir=str(tmp_path / name))
            harness.run_experiment(cfg, ds, sim_factory(inst, "contextual"))
            outs.append(tmp_path / name)
        for rel in ["summary.csv", "metrics.csv", "judge_calls.csv", "curves/TS_50_50.csv",
                    "traces/TS_T_50_50__q001__seed1.jsonl"]:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
        m = [json.loads((o / "manifest.json").read_text()) for o in outs]
        for d in m:
            d.pop("created")
        assert m[0] == m[1]

    def test_two_snapshots_two_rows(self, small, tmp_path):
        inst, ds = small
        cfg = cfg_for(tmp_path, [PolicySpec("TS-25/75", T=20)], snapshot_rounds=[10, 20])
        harness.run_experiment(cfg, ds, sim_factory(inst, "off"))
        rows = (tmp_path / "out" / "summary.csv").read_text().splitlines()
        assert rows[0] == "policy,snapshot,mean,std"
        assert len(rows) == 3

    def test_empty_grid_manifest_only(self, tmp_path):
        cfg = cfg_for(tmp_path, [])
        paths = harness.emit_results(AggregateResult(config=cfg), tmp_path / "out")
        assert [p.name for p in paths] == ["manifest.json"]
        assert sorted(os.listdir(tmp_path / "out")) == ["manifest.json"]

    def test_unwritable_fails_before_work(self, small, tmp_path):
        inst, ds = small
        blocker = tmp_path / "file"
        blocker.write_text("")
        called = []

        def factory(q, rng):
            called.append(q)
            return lambda b: JudgeVerdict(dict.fromkeys(b.doc_ids, 0))

        cfg = ExperimentConfig(policies=[PolicySpec("Uniform", T=5)], snapshot_rounds=[5],
                               output_dir=str(blocker / "sub"))
        with pytest.raises(PermissionError):
            harness.run_experiment(cfg, ds, factory)
        assert called == []

    def test_failure_isolated(self, small, tmp_path):
        inst, ds = small

        def factory(q, rng):
            def judge(batch):
                if q == "q001" and batch.round == 3:
                    raise TimeoutError("judge timed out")
                return JudgeVerdict(dict.fromkeys(batch.doc_ids, 0))
            return judge

        cfg = cfg_for(tmp_path, [PolicySpec("Uniform", T=10)], snapshot_rounds=[10])
        agg = harness.run_experiment(cfg, ds, factory)
        assert len(agg.failures) == 1
        f = agg.failures[0]
        assert (f["query_id"], f["round"]) == ("q001", 3)
        assert {c.query_id for c in agg.cells} == {"q000", "q002"}
        assert json.loads((tmp_path / "out" / "failures.json").read_text())[0]["query_id"] == "q001"
        assert json.loads((tmp_path / "out" / "manifest.json").read_text())["n_failures"] == 1

    def test_judge_call_accounting(self, small, tmp_path):
        inst, ds = small
        pols = [PolicySpec("Uniform", T=20), PolicySpec("TS-T-0/100", T=20, T_f=0, tau=3), PolicySpec("Heapify")]
        cfg = cfg_for(tmp_path, pols, seeds=[0, 1], snapshot_rounds=[20])
        agg = harness.run_experiment(cfg, ds, sim_factory(inst, "contextual"), write=False)
        assert agg.judge_calls["Uniform"] == 20 * 3 * 2
        assert agg.judge_calls["TS-T-0/100"] == 20 * 3 * 2
        heap = [c for c in agg.cells if c.policy == "Heapify"]
        assert agg.judge_calls["Heapify"] == sum(c.judge_calls for c in heap) > 0
        assert all(c.judge_calls == len(c.trace.records) for c in heap)

    def test_population_std_over_seed_means(self, small, tmp_path):
        inst, ds = small
        cfg = cfg_for(tmp_path, [PolicySpec("TS-0/100", T=10)], seeds=[0, 1, 2], snapshot_rounds=[10])
        agg = harness.run_experiment(cfg, ds, sim_factory(inst, "contextual"), write=False)
        per_seed = []
        for s in (0, 1, 2):
            per_seed.append(np.mean([c.ndcg["10"] for c in agg.cells if c.seed == s]))
        assert agg.mean("TS-0/100", 10) == pytest.approx(np.mean(per_seed))
        assert agg.std("TS-0/100", 10) == pytest.approx(np.std(per_seed, ddof=0))

    def test_snapshot_zero_is_first_stage(self, small, tmp_path):
        inst, ds = small
        cfg = cfg_for(tmp_path, [PolicySpec("Uniform", T=5)], snapshot_rounds=[0, 5])
        agg = harness.run_experiment(cfg, ds, sim_factory(inst, "off"), write=False)
        for c in agg.cells:
            first = ds.candidates(c.query_id, 100).doc_ids
            assert c.ndcg["0"] == ndcg_at_k(first, ds.qrels, c.query_id, 10)


class TestRQ1:
    def test_zero_noise_regimes_agree(self):
        inst = make_instance(n_queries=60, seed=3)
        ds = harness.dataset_from_instance(inst)
        res = harness.rq1_variance_experiment(ds, sim_factory(inst, "off"), batch_size=10, trials=30)
        v = [s.mean_per_query_variance for s in res.stats]
        assert max(v) - min(v) <= 0.02

    def test_sharp_preset_ordering(self, small):
        inst, ds = small
        res = harness.rq1_variance_experiment(ds, sim_factory(inst, "sharp"), batch_size=10, trials=30)
        v = {s.regime: s.mean_per_query_variance for s in res.stats}
        assert v["intrinsic"] <= v["positional"] <= v["total"]
        assert res.ordering_rate() == 1.0

    def test_single_trial_excluded(self, small):
        inst, ds = small
        res = harness.rq1_variance_experiment(ds, sim_factory(inst, "contextual"), trials=1)
        assert all(s.n_queries == 0 and len(s.excluded) == 3 for s in res.stats)

    def test_query_without_relevant_skipped(self, small, tmp_path):
        inst, ds = small
        stripped = harness.Dataset(ds.corpus, ds.queries, Qrels.from_mapping(
            {q: {d: 1} for (q, d), g in ds.qrels.judgments.items() if q != "q002" and g}), ds.index)
        res = harness.rq1_variance_experiment(stripped, sim_factory(inst, "contextual"), trials=4)
        assert res.skipped == ["q002"]
        paths = harness.write_rq1([res], tmp_path)
        assert json.loads((tmp_path / "rq1_skipped.json").read_text()) == {"10": ["q002"]}
        assert {p.name for p in paths} >= {"rq1_regimes.csv", "rq1_shares.csv", "rq1_per_query.csv"}


class TestRQ3:
    def test_zero_calls(self, small):
        inst, ds = small
        curve = harness.rq3_convergence_sweep(ds, sim_factory(inst, "contextual"), 0, [0])
        first = np.mean([ndcg_at_k(ds.candidates(q, 100).doc_ids, ds.qrels, q, 10) for q in sorted(ds.queries)])
        assert curve.points == [(0, pytest.approx(first))]

    def test_noiseless_small_pool_reaches_one(self):
        inst = make_instance(n_queries=3, seed=5, n_candidates=20, n_relevant=4)
        ds = harness.dataset_from_instance(inst)
        curve = harness.rq3_convergence_sweep(ds, noiseless_factory(inst), 60, [0, 1], step=10, n_cap=20)
        vals = [v for _, v in curve.points]
        assert vals[-1] == 1.0
        assert vals[-1] >= vals[0]

    def test_plateau(self):
        c = harness.ConvergenceCurve([(0, 0.1), (50, 0.5), (100, 0.6), (150, 0.603), (200, 0.604)])
        assert c.plateau(50, 0.005) == 100
        assert c.marginal_gain(0, 50) == pytest.approx(0.4)
        assert harness.ConvergenceCurve([(0, 0.1), (50, 0.5)]).plateau() is None


def test_query_sampler_seeded(tmp_path):
    inst = make_instance(n_queries=10, seed=2)
    paths = inst.write(tmp_path / "d")
    base = dict(corpus=str(paths["corpus"]), queries=str(paths["queries"]), qrels=str(paths["qrels"]),
                policies=[PolicySpec("Uniform", T=5)], query_sample=4)
    a = harness.load_dataset(ExperimentConfig(**base, query_sample_seed=5))
    b = harness.load_dataset(ExperimentConfig(**base, query_sample_seed=5))
    c = harness.load_dataset(ExperimentConfig(**base, query_sample_seed=6))
    assert list(a.queries) == list(b.queries) and len(a.queries) == 4
    assert list(a.queries) != list(c.queries)


def test_judge_factory_needs_spec():
    with pytest.raises(ValueError):
        harness.make_judge_factory({})


class TestCLI:
    @pytest.fixture(scope="class")
    @classmethod
    def data(cls, tmp_path_factory):
        out = tmp_path_factory.mktemp("synth")
        assert cli.main(["synth", "--out", str(out), "--n-queries", "2", "--seed", "4"]) == 0
        return out

    def test_index_and_retrieve(self, data, tmp_path, capsys):
        cli.main(["index", "--corpus", str(data / "corpus.jsonl")])
        stats = json.loads(capsys.readouterr().out)
        assert stats["documents"] == 200
        cli.main(["retrieve", "--corpus", str(data / "corpus.jsonl"), "--queries", str(data / "queries.jsonl"),
                  "--n-cap", "5", "--out", str(tmp_path / "c.tsv")])
        lines = (tmp_path / "c.tsv").read_text().splitlines()
        assert lines[0] == "query_id\trank\tdoc_id\tscore" and len(lines) == 11

    def test_rerank_and_report(self, data, tmp_path, capsys):
        out = tmp_path / "run"
        (tmp_path / "cfg.yaml").write_text(
            f"corpus: {data}/corpus.jsonl\nqueries: {data}/queries.jsonl\nqrels: {data}/qrels.tsv\n"
            "policies:\n  - {name: TS-50/50, T: 20}\n  - {name: Heapify}\n"
            f"judge: {{simulated: {data}/judge_contextual.json}}\nsnapshot_rounds: [10, 20]\n")
        assert cli.main(["rerank", "--config", str(tmp_path / "cfg.yaml"), "--output-dir", str(out),
                         "--seeds", "0", "1"]) == 0
        assert (out / "summary.csv").read_text().count("\n") == 4
        capsys.readouterr()
        cli.main(["report", str(out), "--reference-shares"])
        text = capsys.readouterr().out
        assert "b=2: positional 0.157 compositional 0.084 contextual 0.241" in text
        assert "b=10: positional 0.363 compositional 0.088 contextual 0.451" in text

    def test_rq1_and_rq3(self, data, tmp_path, capsys):
        common = ["--corpus", str(data / "corpus.jsonl"), "--queries", str(data / "queries.jsonl"),
                  "--qrels", str(data / "qrels.tsv"), "--judge-model", str(data / "judge_sharp.json"),
                  "--output-dir", str(tmp_path)]
        assert cli.main(["rq1", *common, "--trials", "5", "--batch-sizes", "10"]) == 0
        assert (tmp_path / "rq1_regimes.csv").exists()
        assert cli.main(["rq3", *common, "--max-calls", "50", "--step", "25"]) == 0
        assert "plateau" in capsys.readouterr().out
        assert (tmp_path / "curves" / "rq3_uniform.csv").read_text().startswith("calls,mean_ndcg@10\n")

    def test_shipped_configs_parse(self):
        root = os.path.join(os.path.dirname(__file__), "..", "data", "synthetic")
        for name in ("rerank.yaml", "rq1.yaml", "rq3.yaml"):
            cfg = ExperimentConfig.load(os.path.join(root, name))
            assert os.path.exists(cfg.corpus)
            SimulatedJudgeModel.load(cfg.judge["simulated"])
