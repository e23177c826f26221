import re

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        if report.when == "setup":
            detail = "fixture error"
        _CRITERIA[int(m.group(1))] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
