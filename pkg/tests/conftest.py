import pytest

CRITERIA: dict[str, str] = {}


@pytest.fixture
def criterion():
    """Record one verdict line per acceptance criterion."""
    def record(label: str, ok: bool, detail: str) -> None:
        CRITERIA[label] = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
