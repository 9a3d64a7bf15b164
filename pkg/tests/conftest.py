import pytest

_CRITERIA: list = []


@pytest.fixture
def criterion():
    """Record one acceptance line and fail the test when it does not hold."""

    def check(label: str, ok: bool, detail: str) -> None:
        line = f"CRITERION {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
