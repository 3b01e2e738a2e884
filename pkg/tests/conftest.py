from __future__ import annotations

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from recnet.synthetic import SceneSpec
from recnet.training import make_synthetic_sequence


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    # the determinism checks assume one BLAS thread
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sequence():
    return make_synthetic_sequence(SceneSpec(n_scans=8, spacing=1.5), seed=3)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""

    def report(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} -- {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
