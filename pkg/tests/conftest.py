"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import re
from collections import defaultdict

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_outcomes: dict[int, list[tuple[str, str]]] = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[int(m.group(1))].append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_outcomes):
        results = _outcomes[number]
        failed = [name for name, outcome in results if outcome != "passed"]
        verdict = "FAIL" if failed else "PASS"
        detail = f" ({', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {number:2d}: {verdict} [{len(results) - len(failed)}/{len(results)} checks]{detail}")
