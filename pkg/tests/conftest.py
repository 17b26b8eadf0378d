"""Shared pytest wiring.

The acceptance tests each produce one verdict line. Default capture
swallows per-test output for passing tests, so the lines are collected
here and replayed as a terminal section at the end of the run; a plain
`pytest -v` always ends with the full checklist.
"""

CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERION_LINES:
        terminalreporter.write_line(line)
