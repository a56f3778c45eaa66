"""Shared test plumbing: the release-gate checks record one line each and
the terminal summary replays them so the verdict is visible even when
every test passes."""

import _gate


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _gate.ACCEPTANCE:
        terminalreporter.section("release gate")
        for line in _gate.ACCEPTANCE:
            terminalreporter.write_line(line)
