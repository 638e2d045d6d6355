import pytest

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one line per acceptance criterion; all lines are echoed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append((number, f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} -- {detail}"))
        print(ACCEPTANCE_LINES[-1][1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
