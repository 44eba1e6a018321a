import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record ``(criterion, passed, detail)`` for the acceptance summary."""
    def record(number, passed, detail=""):
        _VERDICTS[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
