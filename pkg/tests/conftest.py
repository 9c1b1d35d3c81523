import numpy as np
import pytest

# acceptance tests append (criterion, status, detail) here; printed at the end of the run.
# status is True/False for gating criteria, or a string such as "INFO" for logged-only ones.
ACCEPTANCE_LINES: list[tuple[str, object, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE_LINES:
        label = status if isinstance(status, str) else ("PASS" if status else "FAIL")
        terminalreporter.write_line(f"{label:4s}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
