"""Shared pytest plumbing: a registry for acceptance-criterion verdict lines
so they appear in the terminal summary even when stdout capture is on."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict_log():
    """Callable that records one pass/fail line for the run summary."""
    return _VERDICTS.append


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _VERDICTS:
        terminalreporter.write_line(line)
