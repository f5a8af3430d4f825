"""Shared pytest hooks.

After the run, print one PASS/FAIL line per acceptance criterion so the
acceptance verdict is readable without scanning the full test listing.
"""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def _scan(stats, keys):
    found = []
    for key in keys:
        for rep in stats.get(key, []):
            m = _CRITERION.search(getattr(rep, "nodeid", "") or "")
            if m:
                found.append((int(m.group(1)), m.group(2), rep))
    return found


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    stats = terminalreporter.stats
    results = {}
    for num, name, rep in _scan(stats, ("passed",)):
        if getattr(rep, "when", "call") == "call":
            results.setdefault(num, (name, True))
    for num, name, rep in _scan(stats, ("failed", "error")):
        results[num] = (name, False)
    for num, name, rep in _scan(stats, ("skipped",)):
        results[num] = (name, False)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        name, ok = results[num]
        label = name.replace("_", " ")
        terminalreporter.write_line(
            f"criterion {num:2d} ({label}): {'PASS' if ok else 'FAIL'}")
