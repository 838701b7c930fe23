import re

_CRITERION = re.compile(r"test_c(\d+)_")
_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = _CRITERION.search(report.nodeid)
    if m and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _results[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results, key=lambda n: int(_CRITERION.search(n).group(1))):
        terminalreporter.write_line(f"[{_results[name]}] {name}")
