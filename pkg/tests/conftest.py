"""Prints one verdict line per acceptance criterion after the run.

Tests in test_acceptance.py carry a `criterion(num, label)` marker; every
other test is reported the normal way and ignored here.
"""

import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, label): acceptance-gate check, one verdict line each",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, label = marker.args
    if report.when == "call":
        _RESULTS[num] = (label, "PASS" if report.passed else "FAIL")
    elif report.when == "setup" and report.outcome != "passed":
        # fixture error or skip: the criterion was never exercised
        _RESULTS[num] = (label, "SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        label, verdict = _RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  ({label})")
