import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}
_CRITERION = re.compile(r"test_criterion_(\d+)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = _CRITERION.match(item.name)
    if not m:
        return
    key = int(m.group(1))
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = _CRITERIA.get(key, (True, []))
    notes = [f"{k}={v}" for k, v in item.user_properties] if rep.when == "call" else []
    _CRITERIA[key] = (prev[0] and ok, prev[1] + notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        ok, notes = _CRITERIA[key]
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}"
        if notes:
            line += "  " + ", ".join(notes)
        terminalreporter.write_line(line)
