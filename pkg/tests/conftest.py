from __future__ import annotations

import contextlib

import pytest

_VERDICTS: dict[int, tuple[str, str]] = {}


class Criteria:
    @contextlib.contextmanager
    def check(self, number: int, title: str):
        _VERDICTS[number] = ("FAIL", title)
        yield
        _VERDICTS[number] = ("PASS", title)


@pytest.fixture
def criterion():
    return Criteria()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, title = _VERDICTS[number]
        terminalreporter.write_line(f"{verdict} criterion {number:2d}: {title}")
