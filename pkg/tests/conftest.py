import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> list of (test id, passed, detail)
CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.fixture
def detail(request):
    """Append measured numbers to the acceptance summary line of this test."""
    notes = []
    request.node.user_properties.append(("detail", notes))
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        notes = [n for k, v in item.user_properties if k == "detail" for n in v]
        CRITERIA.setdefault(marker.args[0], []).append((item.name, rep.passed, "; ".join(notes)))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        rows = CRITERIA[n]
        ok = all(p for _, p, _ in rows)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}")
        for name, p, note in rows:
            tr.write_line(f"    {'ok  ' if p else 'FAIL'} {name}" + (f"  [{note}]" if note else ""))
