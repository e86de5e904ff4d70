"""Shared fixtures and the per-criterion report of the acceptance suite."""
import numpy as np
import pytest

_RESULTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        entry = _RESULTS.setdefault(number, [title, True, []])
        entry[1] = entry[1] and report.outcome == "passed"
        entry[2].append(item.name)
        entry.extend(v for k, v in report.user_properties if k == "note")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, tests, *notes = _RESULTS[number]
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:>2} [{status}] {title} ({len(tests)} test{'s' if len(tests) > 1 else ''})"
        if notes:
            line += " - " + "; ".join(notes)
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
