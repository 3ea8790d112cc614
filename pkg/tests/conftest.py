import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def _report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)
        assert passed, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
