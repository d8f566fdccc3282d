"""Shared pytest hooks for the test suite.

Replays the acceptance gate's per-criterion report after the run.  The
gate prints its ``[PASS]``/``[FAIL]`` lines as it goes, but pytest
captures per-test output, so passing criteria would otherwise be silent;
the terminal-summary hook runs outside capture and always shows them.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    module = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    lines = getattr(module, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance gate")
    for line in lines:
        terminalreporter.write_line(line)
