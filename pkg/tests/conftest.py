import numpy as np
import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs")
    config.stash[_ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_ACCEPTANCE]
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per criterion; the test still asserts every check."""

    def record(number: int, checks: dict[str, bool], detail: str) -> None:
        ok = all(checks.values())
        failed = ", ".join(k for k, v in checks.items() if not v)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}" + (f"  [failed: {failed}]" if failed else "")
        request.config.stash[_ACCEPTANCE][number] = line
        print(line)
        assert ok, line

    return record
