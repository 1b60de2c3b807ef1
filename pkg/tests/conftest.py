import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_c(\d\d)_(\w+)")
_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None or "test_acceptance" not in report.nodeid:
        return
    number = m.group(1)
    label = m.group(2).replace("_", " ")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:
            outcome = "PASS"
        elif report.skipped:
            outcome = "SKIP"
        else:
            outcome = "FAIL"
        previous = _results.get(number)
        # several tests can share a criterion; any failure wins
        if previous is None or previous[0] == "PASS" or outcome == "FAIL":
            _results[number] = (outcome, label)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        outcome, label = _results[number]
        terminalreporter.write_line(f"{outcome}  criterion {int(number):2d}: {label}")
