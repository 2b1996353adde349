import contextlib

import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        details = []
        try:
            yield details
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _CRITERIA[number] = f"criterion {number} FAIL  {title}: {'; '.join(details)} ({reason})"
            raise
        _CRITERIA[number] = f"criterion {number} PASS  {title}: {'; '.join(details)}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
