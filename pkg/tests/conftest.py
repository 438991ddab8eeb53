import os

import numpy as np
import pytest

ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_root():
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return os.environ.get("DDMIKIT_ACCEPTANCE_DIR", os.path.join(here, "runs", "acceptance"))
