import re

_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    k = int(m.group(1))
    if report.failed or (report.when == "call" and k not in _criteria):
        _criteria[k] = ("FAIL" if report.failed else report.outcome.upper(), m.group(2).replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        outcome, title = _criteria[k]
        word = "PASS" if outcome == "PASSED" else outcome
        terminalreporter.write_line(f"criterion {k} ({title}): {word}")
