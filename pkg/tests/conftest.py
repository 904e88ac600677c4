"""Prints one pass/fail line per acceptance criterion at the end of the run."""

_results = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        num = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
        detail = dict(report.user_properties).get("detail", "")
        _results[num] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        outcome, detail = _results[num]
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {mark}  {detail}".rstrip())
