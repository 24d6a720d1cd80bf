import pytest

_OUTCOME = {}
_DETAIL = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the current criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")

    def write(text):
        if marker is not None:
            n = marker.args[0]
            _DETAIL[n] = (_DETAIL.get(n, "") + "; " + text).lstrip("; ")

    return write


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or rep.failed:
        n = marker.args[0]
        _OUTCOME[n] = _OUTCOME.get(n, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOME:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOME):
        verdict = "PASS" if _OUTCOME[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {_DETAIL.get(n, '')}".rstrip())
