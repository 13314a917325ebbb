import sys
from collections import defaultdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> [(title, passed, detail)], one entry per covering test
_CRITERIA = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        crash = getattr(rep.longrepr, "reprcrash", None)
        detail = detail or (crash.message.splitlines()[0] if crash else "error")
    _CRITERIA[number].append((title, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entries = _CRITERIA[n]
        ok = all(e[1] for e in entries)
        details = "; ".join(e[2] for e in entries if e[2])
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {entries[0][0]}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
