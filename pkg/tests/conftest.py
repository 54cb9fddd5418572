import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/SKIP line per acceptance criterion."""

    def record(number, title, passed, detail=""):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        line = f"[{status}] criterion {number:>2}: {title}"
        if detail:
            line += f" | {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        if passed is None:
            pytest.skip(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
