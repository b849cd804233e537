import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line; it is echoed in the terminal summary."""

    def record(criterion: int, ok: bool, detail: str):
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _VERDICTS.append((criterion, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
