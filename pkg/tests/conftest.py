"""Shared test plumbing: the acceptance-verdict reporter.

Acceptance tests record one human-readable verdict line each; the lines are
printed in their own section at the end of the run regardless of output
capturing, so a plain ``pytest -v`` shows every measured value next to its
pass/fail status.
"""

import pytest


@pytest.fixture(scope="session")
def verdict(request):
    """Callable recording one summary line for the terminal report."""
    lines = request.config._acceptance_verdicts = getattr(
        request.config, "_acceptance_verdicts", []
    )

    def record(line: str) -> None:
        lines.append(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_verdicts", None)
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
