"""Beta-Bernoulli belief state over candidate documents.

Each candidate carries an independent Beta(alpha, beta) posterior over the
probability that a judge marks it relevant, averaged over the batches it
can appear in. The final ranking sorts by posterior mean.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass
class PosteriorState:
    alpha: float = 1.0
    beta: float = 1.0
    observations: int = 0

    @property
    def mean(self) -> float:
        return posterior_mean(self)


@dataclass
class PosteriorTable:
    """Posterior per candidate, plus the first-stage order used for tie-breaks."""

    entries: dict[str, PosteriorState]
    doc_order: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.entries

    def __getitem__(self, doc_id: str) -> PosteriorState:
        return self.entries[doc_id]

    def alphas(self) -> np.ndarray:
        return np.array([self.entries[d].alpha for d in self.doc_order], dtype=float)

    def betas(self) -> np.ndarray:
        return np.array([self.entries[d].beta for d in self.doc_order], dtype=float)

    def means(self) -> dict[str, float]:
        return {d: posterior_mean(self.entries[d]) for d in self.doc_order}

    def copy(self) -> "PosteriorTable":
        return PosteriorTable(
            {d: PosteriorState(s.alpha, s.beta, s.observations) for d, s in self.entries.items()},
            list(self.doc_order),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["doc_id", "alpha", "beta", "observations", "mean"])
        for d in self.doc_order:
            s = self.entries[d]
            writer.writerow([d, repr(float(s.alpha)), repr(float(s.beta)), s.observations, repr(posterior_mean(s))])
        return buf.getvalue()


def _candidate_ids(candidates) -> list[str]:
    # Accept a CandidateList, (id, score) pairs, or bare ids.
    if hasattr(candidates, "doc_ids"):
        return list(candidates.doc_ids)
    ids = []
    for c in candidates:
        ids.append(c if isinstance(c, str) else c[0])
    return ids


def init_priors(candidates) -> PosteriorTable:
    ids = _candidate_ids(candidates)
    if not ids:
        raise ValueError("candidate list is empty")
    seen: set[str] = set()
    for d in ids:
        if d in seen:
            raise ValueError(f"duplicate candidate id {d!r}")
        seen.add(d)
    return PosteriorTable({d: PosteriorState() for d in ids}, ids)


def _bits_of(verdict) -> Mapping[str, int]:
    return verdict.bits if hasattr(verdict, "bits") else verdict


def _check_bits(table: PosteriorTable, bits: Mapping[str, int]) -> None:
    for d, r in bits.items():
        if d not in table.entries:
            raise KeyError(f"verdict references unknown document {d!r}")
        if r not in (0, 1):
            raise ValueError(f"verdict bit for {d!r} must be 0 or 1, got {r!r}")


def update_posterior(table: PosteriorTable, verdict) -> PosteriorTable:
    """Apply one verdict in place: alpha += r, beta += 1 - r for each judged doc.

    The whole verdict is validated before any state changes.
    """
    bits = _bits_of(verdict)
    _check_bits(table, bits)
    for d, r in bits.items():
        s = table.entries[d]
        r = int(r)
        s.alpha += r
        s.beta += 1 - r
        s.observations += 1
    return table


def apply_counts(table: PosteriorTable, successes: Mapping[str, int], failures: Mapping[str, int]) -> PosteriorTable:
    """Add accumulated success/failure counters to the posteriors (delayed update)."""
    for d in set(successes) | set(failures):
        if d not in table.entries:
            raise KeyError(f"counter references unknown document {d!r}")
    for d in table.doc_order:
        s_i = int(successes.get(d, 0))
        f_i = int(failures.get(d, 0))
        if s_i or f_i:
            s = table.entries[d]
            s.alpha += s_i
            s.beta += f_i
            s.observations += s_i + f_i
    return table


def posterior_mean(state: PosteriorState) -> float:
    return state.alpha / (state.alpha + state.beta)


def sample_theta(state: PosteriorState, rng: np.random.Generator) -> float:
    # numpy's Generator.beta; stays portable as long as the numpy bit generator is.
    return float(rng.beta(state.alpha, state.beta))


def final_ranking(table: PosteriorTable) -> list[str]:
    """Ids by descending posterior mean; ties keep first-stage order."""
    if not table.doc_order:
        raise ValueError("empty posterior table")
    means = np.array([posterior_mean(table.entries[d]) for d in table.doc_order])
    order = np.argsort(-means, kind="stable")
    return [table.doc_order[i] for i in order]


def read_posterior_csv(text: str | Iterable[str]) -> PosteriorTable:
    lines = text.splitlines() if isinstance(text, str) else list(text)
    reader = csv.DictReader(lines)
    entries: dict[str, PosteriorState] = {}
    order: list[str] = []
    for row in reader:
        entries[row["doc_id"]] = PosteriorState(float(row["alpha"]), float(row["beta"]), int(row["observations"]))
        order.append(row["doc_id"])
    return PosteriorTable(entries, order)


__all__: Sequence[str] = [
    "PosteriorState",
    "PosteriorTable",
    "init_priors",
    "update_posterior",
    "apply_counts",
    "posterior_mean",
    "sample_theta",
    "final_ranking",
    "read_posterior_csv",
]
