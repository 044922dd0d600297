import numpy as np
import pytest

# acceptance bookkeeping: criterion number -> title, nodeid -> number, number -> outcomes
_TITLES = {}
_NODES = {}
_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _TITLES[number] = title
            _NODES[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _NODES.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _OUTCOMES.setdefault(number, []).append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_TITLES):
        results = _OUTCOMES.get(number)
        status = "NOT RUN" if not results else ("PASS" if all(results) else "FAIL")
        terminalreporter.write_line(f"criterion {number:2d}: {status:7s} {_TITLES[number]}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
