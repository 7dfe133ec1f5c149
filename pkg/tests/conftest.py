from __future__ import annotations

import pytest

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, passed, detail)``."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = (number, title, bool(passed), detail)
        _ACCEPTANCE.append(line)
        print(_format(line))
        return bool(passed)

    return record


def _format(line) -> str:
    number, title, passed, detail = line
    return f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda x: x[0]):
        terminalreporter.write_line(_format(line))
