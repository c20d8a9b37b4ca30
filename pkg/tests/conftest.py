import pytest

_LINES: list = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion; echoed again in the terminal summary."""
    def rec(label: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        _LINES.append(line)
        print(line)
        return ok
    return rec


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
