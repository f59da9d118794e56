"""Shared test plumbing.

The acceptance gate records one verdict line per criterion here; the
terminal-summary hook replays them after capture ends so every
``pytest`` invocation leaves the full list in its output.
"""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
