import pytest

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict: ``criterion(n, passed, detail)``."""
    def record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 11):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            tr.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n:>2}: NOT RUN")
