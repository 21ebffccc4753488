import re

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not match:
        return
    key = (int(match.group(1)), match.group(2))
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        _ACCEPTANCE[key] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), (outcome, detail) in sorted(_ACCEPTANCE.items()):
        verdict = "PASS" if outcome == "passed" else "FAIL" if outcome == "failed" else outcome.upper()
        line = f"criterion {num:2d} {name.replace('_', ' '):<32} {verdict}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
