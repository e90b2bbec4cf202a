from collections import OrderedDict

import pytest

# criterion name -> list of (test id, outcome, short reason)
_CRITERIA: "OrderedDict[str, list]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test gates")


def pytest_collection_finish(session):
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _CRITERIA.setdefault(mark.args[0], [])


def _reason(report) -> str:
    if report.skipped and isinstance(report.longrepr, tuple):
        return report.longrepr[2]
    crash = getattr(report.longrepr, "reprcrash", None)
    return crash.message.splitlines()[0] if crash else ""


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "pass" if report.passed else "skip" if report.skipped else "fail"
        _CRITERIA[mark.args[0]].append((item.name, status, _reason(report)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, results in _CRITERIA.items():
        statuses = {s for _, s, _ in results}
        if not results:
            verdict = "NOT RUN"
        elif "fail" in statuses:
            verdict = "FAIL"
        elif statuses == {"skip"}:
            verdict = "SKIP"
        else:
            verdict = "PASS"
        tr.write_line(f"{verdict:<8}{name}")
        for test, status, reason in results:
            if status != "pass":
                tr.write_line(f"          {test}: {status}: {reason}")
