"""Collects one verdict line per acceptance criterion and prints them at the end of the session."""

import pytest

VERDICTS: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def verdict():
    """``verdict(number, title, passed, detail)`` records and returns ``passed``."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        VERDICTS[number] = (bool(passed), title, detail)
        print(f"[acceptance {number:>2}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        passed, title, detail = VERDICTS[number]
        terminalreporter.write_line(f"{number:>2}. {'PASS' if passed else 'FAIL'}  {title}  ({detail})")
