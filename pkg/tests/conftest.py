import pytest

from stochmargin.integrator import System
from stochmargin.io import load_case, scenario_from_case

CASES = ("two_bus.json", "nine_bus.json", "ieee39_reduced.json")


@pytest.fixture(scope="session")
def cases():
    return {name: load_case(name) for name in CASES}


@pytest.fixture(scope="session")
def systems():
    """Compiled deterministic systems, built once per session."""
    return {name: System(scenario_from_case(name)) for name in CASES}


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """``record(n, ok, detail)`` stores the verdict of acceptance criterion ``n``."""
    results = request.config.stash[_ACCEPTANCE]

    def record(n, ok, detail):
        results[n] = (ok, detail)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
