import pytest

_criteria: list[str] = []


@pytest.fixture
def report():
    """Record a ``CRITERION n: PASS/FAIL`` line; the lines are echoed in the terminal summary."""

    def record(number, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        _criteria.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
