import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; they are printed
    together at the end of the run."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
