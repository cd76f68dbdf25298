"""Shared pytest setup: collects acceptance verdicts and prints them at the end."""

import pytest

VERDICTS = {}  # criterion number -> (passed, line); property tests report once per example


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    earlier = VERDICTS.get(number)
    if earlier is None or earlier[0] or not passed:
        VERDICTS[number] = (passed, line)


@pytest.fixture
def verdict():
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number][1])
