"""Collects acceptance sub-check outcomes and prints one line per criterion."""

from __future__ import annotations

from collections import defaultdict

import pytest

CRITERIA = 13
_results: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k, part): sub-check of acceptance criterion k")


@pytest.fixture
def note(request):
    """Attach a short measured-value string to the current criterion line."""
    notes: list[str] = []
    request.node.criterion_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        k, part = marker.args
        ok = rep.passed and not hasattr(rep, "wasxfail")
        detail = "; ".join(getattr(item, "criterion_notes", []))
        _results[k].append((part, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in range(1, CRITERIA + 1):
        parts = _results.get(k)
        if not parts:
            tr.write_line(f"criterion {k:2d}: NOT RUN")
            continue
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        bits = []
        for part, ok, detail in parts:
            tag = "" if ok else " [fail]"
            bits.append(f"{part}{tag}" + (f" ({detail})" if detail else ""))
        tr.write_line(f"criterion {k:2d}: {status}  " + " | ".join(bits))
