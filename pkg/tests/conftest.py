from __future__ import annotations

import pytest

_RESULTS: dict[int, tuple[str, bool]] = {}
_DETAILS: dict[int, list[str]] = {}


@pytest.fixture
def detail(request):
    """Attach a measured-value note to the current criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        if marker is not None:
            _DETAILS.setdefault(marker.args[0], []).append(text)
    return note


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    item_marker = getattr(report, "criterion", None)
    if item_marker is None:
        return
    n, title = item_marker
    ok = report.passed if report.when == "call" else not report.failed
    prev = _RESULTS.get(n, (title, True))[1]
    _RESULTS[n] = (title, prev and ok and not report.skipped)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
        for text in _DETAILS.get(n, []):
            terminalreporter.write_line(f"             {text}")
