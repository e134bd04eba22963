import numpy as np
import pytest

from setrank.judge import SimulatedJudge, SimulatedJudgeModel, bind
from setrank.retrieval import CandidateList


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def noiseless_judge(truth, seed=0):
    """Bernoulli judge whose probabilities are exactly ``truth`` (0/1 gives a deterministic judge)."""
    return bind(SimulatedJudge(SimulatedJudgeModel(dict(truth), seed=seed)))


def ids(n, prefix="d"):
    return [f"{prefix}{i:03d}" for i in range(n)]


def candidates(n, prefix="d"):
    return CandidateList.from_ids(ids(n, prefix))


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one criterion's outcome for the run summary."""
    def record(n, ok, detail=""):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}  {detail}")
