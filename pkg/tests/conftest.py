"""Shared pytest hooks for the test suite."""

import sys


def pytest_terminal_summary(terminalreporter):
    # echo the acceptance verdict lines after capture has been torn down,
    # so the final report always shows one PASS/FAIL line per criterion
    for name in ("test_acceptance", "tests.test_acceptance"):
        mod = sys.modules.get(name)
        lines = getattr(mod, "CRITERION_LINES", None) if mod else None
        if lines:
            terminalreporter.section("acceptance criteria")
            for line in lines:
                terminalreporter.write_line(line)
            return
