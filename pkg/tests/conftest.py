from __future__ import annotations

import pytest

_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one ``criterion ... PASS/FAIL`` line for the end-of-run summary."""
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
