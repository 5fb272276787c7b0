import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``criterion(k, ok, detail)`` records and prints one acceptance line, then asserts ``ok``."""

    def record(k, ok, detail):
        line = f"CRITERION {k:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.stash[_RESULTS][k] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
