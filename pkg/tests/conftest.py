import pytest

_LINES = []


@pytest.fixture
def verdict_line(request):
    """Record one acceptance line; it is echoed live and again in the terminal summary."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(tag, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {tag}: {detail}"
        _LINES.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
