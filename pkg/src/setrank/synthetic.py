"""Desk-scale synthetic benchmark.

Each query gets its own pool of 100 passages: 10 relevant passages with judge
relevance drawn from U[0.6, 0.95] and 90 distractors drawn from U[0.02, 0.25].
Every passage carries the query's topic token, so BM25 returns exactly the
query's pool; term counts are only weakly tied to relevance, which leaves the
first-stage ordering noisy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .judge import SimulatedJudgeModel
from .metrics import Qrels
from .retrieval import Corpus

N_CANDIDATES = 100
N_RELEVANT = 10
RELEVANT_THETA = (0.6, 0.95)
DISTRACTOR_THETA = (0.02, 0.25)

_FILLER = (
    "river stone market winter signal garden copper lantern harbor meadow "
    "engine thread canvas orbit valley pillar ember marble compass feather "
    "anchor circuit glacier ledger mosaic prism quarry saddle timber vessel"
).split()

# Judge noise presets. "contextual" is a mild lost-in-the-middle slot bias plus
# a small lift from relevant neighbours. "sharp" makes a relevant passage
# recognisable only next to another relevant passage and never in the last
# slot, which keeps a fixed batch nearly deterministic.
PRESETS: dict[str, dict] = {
    "off": {"positional_bias": [0.0] * 10, "compositional_gain": 0.0},
    "contextual": {
        "positional_bias": [0.05, 0.02, 0.0, -0.03, -0.06, -0.06, -0.03, 0.0, 0.02, 0.05],
        "compositional_gain": 0.15,
    },
    "sharp": {
        "positional_bias": [-1.0] * 9 + [-6.0],
        "compositional_gain": 13.5,
    },
}


@dataclass
class SyntheticInstance:
    corpus: Corpus
    queries: dict[str, str]
    qrels: Qrels
    theta: dict[str, float]

    def judge_model(self, preset: str = "off", seed: int = 0, threshold: float = 0.5) -> SimulatedJudgeModel:
        p = PRESETS[preset]
        return SimulatedJudgeModel(dict(self.theta), list(p["positional_bias"]), p["compositional_gain"],
                                   threshold, seed)

    def pool(self, query_id: str) -> list[str]:
        return [d for d in self.corpus.docs if d.startswith(f"{query_id}-")]

    def write(self, out_dir: str | Path, preset: str = "contextual", judge_seed: int = 0) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": out / "corpus.jsonl",
            "queries": out / "queries.jsonl",
            "qrels": out / "qrels.tsv",
            "judge": out / "judge.json",
        }
        with open(paths["corpus"], "w") as f:
            for d, doc in self.corpus.docs.items():
                f.write(json.dumps({"_id": d, "title": doc.title, "text": doc.body}) + "\n")
        with open(paths["queries"], "w") as f:
            for q, text in self.queries.items():
                f.write(json.dumps({"_id": q, "text": text}) + "\n")
        paths["qrels"].write_text(self.qrels.to_tsv())
        for name in PRESETS:
            model = self.judge_model(name, judge_seed)
            text = json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n"
            paths[f"judge_{name}"] = out / f"judge_{name}.json"
            paths[f"judge_{name}"].write_text(text)
            if name == preset:
                paths["judge"].write_text(text)
        return paths


def make_instance(n_queries: int = 20, seed: int = 7, n_candidates: int = N_CANDIDATES,
                  n_relevant: int = N_RELEVANT) -> SyntheticInstance:
    rng = np.random.default_rng(seed)
    records = []
    queries: dict[str, str] = {}
    judgments: dict[str, dict[str, int]] = {}
    theta: dict[str, float] = {}
    for qi in range(n_queries):
        qid = f"q{qi:03d}"
        topic, k1, k2 = f"topic{qi}", f"aspect{qi}a", f"aspect{qi}b"
        queries[qid] = f"{topic} {k1} {k2}"
        relevant = set(rng.choice(n_candidates, size=n_relevant, replace=False).tolist())
        judgments[qid] = {}
        for j in range(n_candidates):
            did = f"{qid}-d{j:03d}"
            is_rel = j in relevant
            lo, hi = RELEVANT_THETA if is_rel else DISTRACTOR_THETA
            theta[did] = float(rng.uniform(lo, hi))
            if is_rel:
                judgments[qid][did] = 1
            # aspect-term counts lean slightly towards relevant passages
            lam = 1.2 if is_rel else 0.9
            words = [topic] + [k1] * int(rng.poisson(lam)) + [k2] * int(rng.poisson(lam))
            words += list(rng.choice(_FILLER, size=int(rng.integers(8, 40))))
            rng.shuffle(words)
            records.append((did, f"Passage {qid} {j:03d}", " ".join(words)))
    return SyntheticInstance(Corpus.from_records(records), queries, Qrels.from_mapping(judgments), theta)
