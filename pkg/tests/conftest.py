import logging

import numpy as np
import pytest

from dsmcbf import _backend
from dsmcbf.pendulum import build


@pytest.fixture(autouse=True)
def _quiet_fallback_warnings():
    logging.getLogger("dsmcbf").setLevel(logging.ERROR)
    yield
    logging.getLogger("dsmcbf").setLevel(logging.NOTSET)


@pytest.fixture(scope="session")
def pendulum():
    model, cmap, params = build()
    return model, cmap, params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


backends = pytest.mark.parametrize("backend", _backend.available_backends())


ACCEPTANCE: dict[int, list] = {}  # criterion -> [(part title, ok, detail)]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number}: {verdict}")
        for title, ok, detail in parts:
            terminalreporter.write_line(f"    [{'ok' if ok else 'not met'}] {title}: {detail}")
