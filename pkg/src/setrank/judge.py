"""Setwise relevance judges.

A judge receives a query and an ordered batch of documents and returns one
relevance bit per document. Three judges live here:

* ``SimulatedJudge``: Bernoulli draws from an additive model with per-slot
  bias and a coupling to how many other batch members are truly relevant.
* ``StrictOrderJudge``: noiseless, marks only the best document of a batch.
* ``RemoteJudge``: sends the prompt over HTTP and parses the answer block.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

SYSTEM_PROMPT = (
    "Respond in the following format:\n"
    "<reasoning>\n"
    "Your detailed reasoning goes here...\n"
    "</reasoning>\n"
    "<answer>\n"
    "Relevant passages: title1, title2, ...\n"
    '(If no passages are relevant, respond with: "Relevant passages: No relevant passages")\n'
    "</answer>"
)

USER_INSTRUCTIONS = (
    "Identify all the relevant passages for answering the given query. "
    "Explain your reasoning step by step."
)

NO_RELEVANT = "no relevant passages"
ANSWER_PREFIX = "relevant passages:"


class JudgeError(RuntimeError):
    """A judge call failed; ``raw_output`` holds whatever the judge returned."""

    def __init__(self, message: str, raw_output: str | None = None):
        super().__init__(message)
        self.raw_output = raw_output


class AnswerParseError(JudgeError):
    pass


class TransportError(JudgeError):
    pass


class JudgeTimeout(JudgeError):
    pass


class HTTPStatusError(JudgeError):
    def __init__(self, status: int, raw_output: str | None = None):
        super().__init__(f"judge endpoint returned status {status}", raw_output)
        self.status = status


@dataclass
class Batch:
    doc_ids: list[str]
    round: int = 0

    def __post_init__(self):
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError(f"batch ids must be distinct: {self.doc_ids}")
        if not self.doc_ids:
            raise ValueError("batch is empty")

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __iter__(self):
        return iter(self.doc_ids)

    def slot(self, doc_id: str) -> int:
        return self.doc_ids.index(doc_id)


@dataclass
class JudgeVerdict:
    bits: dict[str, int]
    raw_output: str | None = None
    unmatched: list[str] = field(default_factory=list)

    @property
    def relevant(self) -> list[str]:
        return [d for d, r in self.bits.items() if r]


class Judge(Protocol):
    def judge_batch(self, query: str, batch: Batch, docs: Mapping | None = None) -> JudgeVerdict: ...


def bind(judge: Judge, query: str = "", docs: Mapping | None = None) -> Callable[[Batch], JudgeVerdict]:
    """Close over query and document store so policies can call ``judge(batch)``."""

    def call(batch: Batch) -> JudgeVerdict:
        return judge.judge_batch(query, batch, docs)

    return call


# --------------------------------------------------------------------------
# simulated judges


@dataclass
class SimulatedJudgeModel:
    base_theta: dict[str, float]
    positional_bias: list[float] = field(default_factory=list)
    compositional_gain: float = 0.0
    relevance_threshold: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulatedJudgeModel":
        return cls(
            base_theta={str(k): float(v) for k, v in d["base_theta"].items()},
            positional_bias=[float(x) for x in d.get("positional_bias", [])],
            compositional_gain=float(d.get("compositional_gain", 0.0)),
            relevance_threshold=float(d.get("relevance_threshold", 0.5)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimulatedJudgeModel":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            return cls.from_dict(yaml.safe_load(text))
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "base_theta": dict(self.base_theta),
            "positional_bias": list(self.positional_bias),
            "compositional_gain": self.compositional_gain,
            "relevance_threshold": self.relevance_threshold,
            "seed": self.seed,
        }


def simulate_judgment_prob(model: SimulatedJudgeModel, doc: str, batch: Batch) -> float:
    if doc not in batch.doc_ids:
        raise ValueError(f"document {doc!r} is not in the batch")
    slot = batch.slot(doc)
    bias = model.positional_bias[slot] if slot < len(model.positional_bias) else 0.0
    others = [d for d in batch.doc_ids if d != doc]
    frac = 0.0
    if others and model.compositional_gain:
        hits = sum(1 for d in others if model.base_theta.get(d, 0.0) > model.relevance_threshold)
        frac = hits / len(others)
    p = model.base_theta[doc] + bias + model.compositional_gain * frac
    return min(1.0, max(0.0, p))


class SimulatedJudge:
    """Stateful Bernoulli judge; its stream is seeded from ``model.seed`` unless an rng is given."""

    def __init__(self, model: SimulatedJudgeModel, rng: np.random.Generator | None = None):
        self.model = model
        self.rng = rng if rng is not None else np.random.default_rng(model.seed)
        self.calls = 0

    def probabilities(self, batch: Batch) -> np.ndarray:
        return np.array([simulate_judgment_prob(self.model, d, batch) for d in batch.doc_ids])

    def judge_batch(self, query: str, batch: Batch, docs: Mapping | None = None) -> JudgeVerdict:
        p = self.probabilities(batch)
        u = self.rng.random(len(p))
        self.calls += 1
        return JudgeVerdict({d: int(x < pi) for d, x, pi in zip(batch.doc_ids, u, p)})

    __call__ = judge_batch


class StrictOrderJudge:
    """Noiseless judge that marks exactly the highest-scoring member of each batch."""

    def __init__(self, scores: Mapping[str, float]):
        self.scores = dict(scores)
        self.calls = 0

    def judge_batch(self, query: str, batch: Batch, docs: Mapping | None = None) -> JudgeVerdict:
        self.calls += 1
        best = max(batch.doc_ids, key=lambda d: self.scores[d])
        return JudgeVerdict({d: int(d == best) for d in batch.doc_ids})


# --------------------------------------------------------------------------
# prompt format and answer parsing


@dataclass
class PromptBundle:
    system_text: str
    user_text: str
    passages: list[tuple[str, str]]
    query: str = ""

    def to_request(self) -> dict:
        return {
            "system": self.system_text,
            "user": self.user_text,
            "query": self.query,
            "passages": [{"title": t, "text": b} for t, b in self.passages],
        }

    def render_user_message(self) -> str:
        """Plain-text user turn: instructions, query, then one ``[title]`` block per passage."""
        parts = [self.user_text, "", f"Query: {self.query}", ""]
        for title, body in self.passages:
            parts.append(f"[{title}]")
            parts.append(body)
            parts.append("")
        return "\n".join(parts).rstrip() + "\n"


def _norm_title(t: str) -> str:
    return " ".join(t.split()).casefold()


def format_prompt(query: str, batch: Batch, docs: Mapping) -> PromptBundle:
    if not query or not query.strip():
        raise ValueError("query is empty")
    passages = []
    seen: set[str] = set()
    for d in batch.doc_ids:
        doc = docs[d]
        title = (doc.title if hasattr(doc, "title") else doc[0]).strip()
        body = doc.body if hasattr(doc, "body") else doc[1]
        if not title:
            raise ValueError(f"document {d!r} has no title")
        key = _norm_title(title)
        if key in seen:
            raise ValueError(f"duplicate title {title!r} in batch")
        seen.add(key)
        passages.append((title, body))
    return PromptBundle(SYSTEM_PROMPT, USER_INSTRUCTIONS, passages, query)


_OPEN = "<answer>"
_CLOSE = "</answer>"
_REASONING = re.compile(r"<reasoning>.*?</reasoning>", re.DOTALL | re.IGNORECASE)


def _answer_span(raw: str) -> str:
    text = _REASONING.sub("", raw)
    lower = text.lower()
    if lower.count(_OPEN) != 1 or lower.count(_CLOSE) != 1:
        raise AnswerParseError("answer block needs exactly one opening and one closing tag", raw)
    start = lower.index(_OPEN) + len(_OPEN)
    end = lower.index(_CLOSE)
    if end < start:
        raise AnswerParseError("closing answer tag precedes opening tag", raw)
    return text[start:end]


def parse_answer_block(raw: str, batch_titles: Sequence[str], doc_ids: Sequence[str] | None = None) -> JudgeVerdict:
    """Turn ``<answer>Relevant passages: A, C</answer>`` into per-title bits.

    Bits are keyed by ``doc_ids`` when given (parallel to ``batch_titles``),
    otherwise by the titles themselves.
    """
    keys = list(doc_ids) if doc_ids is not None else list(batch_titles)
    if len(keys) != len(batch_titles):
        raise ValueError("doc_ids and batch_titles differ in length")
    lookup: dict[str, str] = {}
    for title, key in zip(batch_titles, keys):
        nt = _norm_title(title)
        if nt in lookup:
            raise ValueError(f"batch titles are not unique: {title!r}")
        lookup[nt] = key

    span = _answer_span(raw).strip()
    if span.lower().startswith(ANSWER_PREFIX):
        span = span[len(ANSWER_PREFIX):]
    bits = {k: 0 for k in keys}
    unmatched: list[str] = []
    if _norm_title(span).strip(" .") == NO_RELEVANT:
        return JudgeVerdict(bits, raw, unmatched)
    for token in span.split(","):
        nt = _norm_title(token)
        if not nt:
            continue
        if nt in lookup:
            bits[lookup[nt]] = 1
        else:
            unmatched.append(token.strip())
    return JudgeVerdict(bits, raw, unmatched)


# --------------------------------------------------------------------------
# remote judge


def remote_judge_call(endpoint: str, bundle: PromptBundle, timeout: float = 60.0, retries: int = 2,
                      api_key: str | None = None, backoff: float = 0.0, client=None) -> str:
    """POST the prompt bundle as JSON and return the raw completion text.

    Retries only on transport failures and 5xx responses; a timeout is
    raised as ``JudgeTimeout`` once retries are exhausted.
    """
    import httpx

    headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
    payload = bundle.to_request()
    own_client = client is None
    client = client or httpx.Client(timeout=timeout)
    last: JudgeError | None = None
    try:
        for attempt in range(retries + 1):
            if attempt and backoff:
                time.sleep(backoff * attempt)
            try:
                resp = client.post(endpoint, json=payload, headers=headers, timeout=timeout)
            except httpx.TimeoutException as e:
                last = JudgeTimeout(f"judge call timed out after {timeout}s: {e}")
                continue
            except httpx.TransportError as e:
                last = TransportError(f"transport error: {e}")
                continue
            if resp.status_code >= 500:
                last = HTTPStatusError(resp.status_code, resp.text)
                continue
            if resp.status_code >= 400:
                raise HTTPStatusError(resp.status_code, resp.text)
            return _completion_text(resp)
    finally:
        if own_client:
            client.close()
    assert last is not None
    raise last


def _completion_text(resp) -> str:
    ctype = resp.headers.get("content-type", "")
    if "json" in ctype:
        body = resp.json()
        if isinstance(body, str):
            return body
        for key in ("completion", "text", "output"):
            if isinstance(body, dict) and isinstance(body.get(key), str):
                return body[key]
        raise JudgeError("JSON response carries no completion string", resp.text)
    return resp.text


class RemoteJudge:
    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 2, api_key: str | None = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.api_key = api_key
        self.calls = 0

    def judge_batch(self, query: str, batch: Batch, docs: Mapping | None = None) -> JudgeVerdict:
        if docs is None:
            raise ValueError("remote judge needs a document store")
        bundle = format_prompt(query, batch, docs)
        self.calls += 1
        raw = remote_judge_call(self.endpoint, bundle, self.timeout, self.retries, self.api_key)
        return parse_answer_block(raw, [t for t, _ in bundle.passages], batch.doc_ids)
