import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Records one pass/fail line for an acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
