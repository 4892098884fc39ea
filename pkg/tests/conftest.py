import pytest

# criterion number -> (title, any test failed)
_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    failed = _results.get(num, (title, False))[1] or rep.failed
    _results[num] = (title, failed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        title, failed = _results[num]
        terminalreporter.write_line(f"[{'FAIL' if failed else 'PASS'}] {num:>2}. {title}")
