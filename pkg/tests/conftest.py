from __future__ import annotations

import pytest

CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_log() -> list[str]:
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
