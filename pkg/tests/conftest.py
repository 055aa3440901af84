import pytest

RESULTS = []


@pytest.fixture
def record():
    """Collect a one-line verdict for the terminal summary."""
    def add(label, passed, detail=""):
        RESULTS.append((label, bool(passed), detail))
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
