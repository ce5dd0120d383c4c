from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from vlamia.core import InferenceRecord, PROMPT_ORIGINAL
from vlamia.corpus import apply_split, generate_corpus, sample_eval_sets, split_corpus

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs that train the surrogate")


@pytest.fixture(scope="session")
def small_corpus():
    """2 tasks x 6 trajectories x 10 steps, d=3, split 50/50."""
    meta, trajs = generate_corpus(2, 6, 3, 10, seed=3, bins=16)
    trajs = apply_split(trajs, split_corpus(trajs, 0.5, seed=3))
    return meta, trajs


@pytest.fixture(scope="session")
def small_manifest(small_corpus):
    _, trajs = small_corpus
    return sample_eval_sets(trajs, 12, 2, seed=3)


def uniform_record(tid="t", step=0, d=3, B=4, prompt_mode=PROMPT_ORIGINAL, action=None):
    rows = np.full((d, B), -np.log(B))
    return InferenceRecord(tid, step, np.zeros(d) if action is None else action, rows,
                           np.full(d, -np.log(B)), prompt_mode)


# Acceptance criteria report their verdicts here; printed at the end of the session.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
