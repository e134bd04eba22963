"""First-stage BM25 retrieval over a JSON-lines corpus."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

_NON_ALNUM = re.compile(r"[^0-9a-z]+")

DEFAULT_K1 = 1.5
DEFAULT_B_LEN = 0.75
DEFAULT_N_CAP = 100


@dataclass(frozen=True)
class Document:
    title: str
    body: str

    @property
    def text(self) -> str:
        return f"{self.title} {self.body}" if self.title else self.body


@dataclass
class Corpus:
    docs: dict[str, Document]
    doc_lengths: dict[str, int] = field(default_factory=dict)

    @property
    def n_docs(self) -> int:
        return len(self.docs)

    @property
    def avgdl(self) -> float:
        return sum(self.doc_lengths.values()) / len(self.doc_lengths) if self.doc_lengths else 0.0

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, str]], stopwords=None) -> "Corpus":
        docs: dict[str, Document] = {}
        for doc_id, title, body in records:
            if doc_id in docs:
                raise ValueError(f"duplicate document id {doc_id!r}")
            docs[doc_id] = Document(title, body)
        lengths = {d: len(tokenize(doc.text, stopwords)) for d, doc in docs.items()}
        return cls(docs, lengths)


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    avgdl: float
    k1: float = DEFAULT_K1
    b_len: float = DEFAULT_B_LEN
    stopwords: frozenset[str] | None = None
    # term frequencies per doc, kept for O(1) scoring of a single document
    _tf: dict[str, dict[str, int]] = field(default_factory=dict, repr=False)

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def tf(self, term: str, doc_id: str) -> int:
        return self._tf[doc_id].get(term, 0)


@dataclass
class CandidateList:
    query_id: str
    entries: list[tuple[str, float]]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(self.entries)

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    @classmethod
    def from_ids(cls, ids: Iterable[str], query_id: str = "") -> "CandidateList":
        # Synthetic candidates: strictly decreasing placeholder scores keep the given order.
        ids = list(ids)
        return cls(query_id, [(d, float(len(ids) - i)) for i, d in enumerate(ids)])


def tokenize(text: str, stopwords=None) -> list[str]:
    terms = [t for t in _NON_ALNUM.split(text.lower()) if t]
    if stopwords:
        terms = [t for t in terms if t not in stopwords]
    return terms


def build_index(corpus: Corpus, k1: float = DEFAULT_K1, b_len: float = DEFAULT_B_LEN, stopwords=None) -> InvertedIndex:
    if not corpus.docs:
        raise ValueError("cannot index an empty corpus")
    stop = frozenset(stopwords) if stopwords else None
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    tfs: dict[str, dict[str, int]] = {}
    for doc_id in sorted(corpus.docs):
        terms = tokenize(corpus.docs[doc_id].text, stop)
        lengths[doc_id] = len(terms)
        counts = Counter(terms)
        tfs[doc_id] = dict(counts)
        for term in sorted(counts):
            postings.setdefault(term, []).append((doc_id, counts[term]))
    avgdl = sum(lengths.values()) / len(lengths)
    return InvertedIndex(postings, lengths, avgdl, k1, b_len, stop, tfs)


def bm25_score(index: InvertedIndex, query_terms: list[str], doc_id: str) -> float:
    if doc_id not in index.doc_lengths:
        raise KeyError(f"document {doc_id!r} is not in the index")
    dl = index.doc_lengths[doc_id]
    norm = index.k1 * (1.0 - index.b_len + index.b_len * dl / index.avgdl) if index.avgdl else index.k1
    score = 0.0
    for term in query_terms:
        tf = index.tf(term, doc_id)
        if tf == 0:
            continue
        score += index.idf(term) * tf * (index.k1 + 1.0) / (tf + norm)
    return score


def retrieve_top_n(index: InvertedIndex, query: str, n: int = DEFAULT_N_CAP, query_id: str = "") -> CandidateList:
    if n < 1:
        raise ValueError("n must be >= 1")
    terms = tokenize(query, index.stopwords)
    matched = {doc_id for t in set(terms) for doc_id, _ in index.postings.get(t, ())}
    scored = [(d, bm25_score(index, terms, d)) for d in matched]
    scored = [(d, s) for d, s in scored if s > 0.0]
    scored.sort(key=lambda x: (-x[1], x[0]))
    return CandidateList(query_id, scored[:n])


def _read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def ingest_corpus(path: str | Path, stopwords=None) -> Corpus:
    records = []
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        if "_id" not in rec:
            raise ValueError(f"{path}:{lineno}: missing '_id'")
        doc_id = str(rec["_id"])
        if doc_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate '_id' {doc_id!r}")
        seen.add(doc_id)
        records.append((doc_id, str(rec.get("title") or ""), str(rec.get("text") or "")))
    return Corpus.from_records(records, stopwords)


def load_queries(path: str | Path) -> dict[str, str]:
    queries: dict[str, str] = {}
    for lineno, rec in _read_jsonl(path):
        if "_id" not in rec or "text" not in rec:
            raise ValueError(f"{path}:{lineno}: query needs '_id' and 'text'")
        queries[str(rec["_id"])] = str(rec["text"])
    return queries


def write_candidates_tsv(candidates: Iterable[CandidateList]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(["query_id", "rank", "doc_id", "score"])
    for cl in candidates:
        for rank, (d, s) in enumerate(cl.entries, 1):
            writer.writerow([cl.query_id, rank, d, repr(float(s))])
    return buf.getvalue()


def read_candidates_tsv(text: str) -> dict[str, CandidateList]:
    out: dict[str, CandidateList] = {}
    for row in csv.DictReader(text.splitlines(), delimiter="\t"):
        cl = out.setdefault(row["query_id"], CandidateList(row["query_id"], []))
        cl.entries.append((row["doc_id"], float(row["score"])))
    return out
