"""Collect acceptance-criterion outcomes and print one line per criterion."""
import pytest

_RANK = {"SKIP": 0, "PASS": 1, "FAIL": 2}
_RESULTS = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or not (call.when == "call" or call.excinfo is not None):
        return
    if call.excinfo is None:
        status = "PASS"
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        status = "SKIP"
    else:
        status = "FAIL"
    num, title = mark.args
    # several tests may cover one criterion; the worst outcome wins
    prev = _RESULTS.get(num, (title, "SKIP"))[1]
    _RESULTS[num] = (title, max(prev, status, key=_RANK.get))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        title, status = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num:>2}: {status}  {title}")
