import numpy as np
import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry["ran"] = True
        entry["ok"] = entry["ok"] and rep.passed
        entry["notes"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] else "NOT RUN")
        notes = ("  [" + ", ".join(e["notes"]) + "]") if e["notes"] else ""
        tr.write_line(f"criterion {n:>2}: {status}  {e['title']}{notes}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
