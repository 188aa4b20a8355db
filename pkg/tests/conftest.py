import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one ``criterion N: PASS|FAIL ...`` line for the end-of-run summary."""
    def record(name: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
