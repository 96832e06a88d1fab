"""Per-criterion PASS/FAIL summary for the acceptance suite."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "status": "PASS", "details": []})
    if report.skipped:
        if entry["status"] == "PASS":
            entry["status"] = "SKIP"
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        reason = reason.replace("Skipped: ", "")
        if reason not in entry["details"]:
            entry["details"].append(reason)
    elif report.failed:
        entry["status"] = "FAIL"
    if report.when == "call":
        entry["details"].extend(f"{k}={v}" for k, v in report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        details = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:>2} {entry['status']:<4} {entry['title']}"
                                    + (f" ({details})" if details else ""))
