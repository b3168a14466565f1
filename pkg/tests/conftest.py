import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary prints them in criterion order."""
    def record(n: int, passed: bool, detail: str) -> bool:
        CRITERIA[n] = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(CRITERIA[n])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
