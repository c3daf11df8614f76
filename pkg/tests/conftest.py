"""Shared pytest hooks: one pass/fail line per acceptance criterion."""

import pytest

CRITERIA_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.skipped:
            status = "SKIP"
        else:
            status = "PASS" if report.passed else "FAIL"
        detail = getattr(item, "criterion_detail", "")
        CRITERIA_RESULTS[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in CRITERIA_RESULTS.items():
        terminalreporter.write_line(f"{status:4s}  {name}" + (f"  [{detail}]" if detail else ""))
