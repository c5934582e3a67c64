"""Collects the acceptance suite's outcomes and prints one line per criterion."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str, float, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    detail = "; ".join(f"{v}" for k, v in report.user_properties if k == "detail")
    if report.when == "call" or report.outcome != "passed":
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        prev = _results.get(num)
        if prev is None or prev[0] == "PASS":
            _results[num] = (outcome, m.group(2).replace("_", " "), report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        outcome, title, seconds, detail = _results[num]
        line = f"criterion {num:2d}: {outcome}  {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
