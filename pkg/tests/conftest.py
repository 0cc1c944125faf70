"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

RESULTS: dict = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        RESULTS[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
