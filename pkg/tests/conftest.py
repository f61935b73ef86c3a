import numpy as np
import pytest
from hypothesis import settings

from pgvl import engine

settings.register_profile("pgvl", max_examples=30, deadline=None)
settings.load_profile("pgvl")


@pytest.fixture(autouse=True)
def finite_checks():
    engine.set_debug(True)
    yield
    engine.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(key: str, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE[key] = (bool(passed), f"{title}: {detail}" if detail else title)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        passed, text = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<4} {'PASS' if passed else 'FAIL'}  {text}")
