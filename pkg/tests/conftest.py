import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.skipped:
        return
    key = marker.args
    failed = _OUTCOMES.get(key, False) or report.failed
    if report.when == "call" or failed:
        _OUTCOMES[key] = failed


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), failed in sorted(_OUTCOMES.items()):
        terminalreporter.write_line(f"criterion {number:2d} {'FAIL' if failed else 'PASS'}  {title}")
