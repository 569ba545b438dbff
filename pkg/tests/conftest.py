import os

import pytest

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or not report.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.skipped:
        status = "SKIP"
        detail = detail or (report.longrepr[-1] if isinstance(report.longrepr, tuple) else "")
    else:
        status = "PASS" if report.passed else "FAIL"
    _outcomes.setdefault(marker.args[0], (status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_outcomes):
        status, detail = _outcomes[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {status}  {detail}".rstrip())


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the acceptance report."""
    def put(text):
        request.node.user_properties[:] = [p for p in request.node.user_properties if p[0] != "detail"]
        request.node.user_properties.append(("detail", text))
    return put


@pytest.fixture(autouse=True)
def _sequential_by_default(monkeypatch):
    if "FEDGUARD_THREADS" not in os.environ:
        monkeypatch.setenv("FEDGUARD_THREADS", "0")
