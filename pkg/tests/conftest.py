import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records one acceptance line and returns ``passed``."""
    lines = request.config.stash[_KEY]

    def record(n: int, passed: bool, detail: str) -> bool:
        lines.append((n, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
