import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from catbbm import ModelParams  # noqa: E402


@pytest.fixture
def unit():
    return ModelParams.binary(1.0, 1.0)


# one line per acceptance criterion, printed at the end of the session
_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
