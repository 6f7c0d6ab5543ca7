"""Acceptance bookkeeping: one PASS/FAIL line per criterion at the end of the run."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n, title = marker.args
    entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "notes": []})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
    if report.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "note"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        line = f"criterion {n}: {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["notes"]:
            line += "  [" + "; ".join(r["notes"]) + "]"
        tr.write_line(line)


@pytest.fixture
def note(record_property):
    """Attach a short measurement to the criterion summary line."""
    return lambda text: record_property("note", text)
