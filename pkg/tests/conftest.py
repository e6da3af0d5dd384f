import numpy as np
import pytest

from cocyclelab.cli import load_fixture
from cocyclelab.cocycle import CocycleSpec
from cocyclelab.dynamics import SymbolicSystem

_RESULTS_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_RESULTS_KEY, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(rows):
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


class Recorder:
    def __init__(self, sink):
        self.sink = sink
        self.entry = None

    def __call__(self, num, title, ok, detail=""):
        ok = bool(ok)
        self.entry = (num, title, ok, detail)
        line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        assert ok, line


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion, then assert it."""
    rec = Recorder(request.config.stash[_RESULTS_KEY])
    yield rec
    if rec.entry is not None:
        rec.sink.append(rec.entry)
    else:
        mark = request.node.get_closest_marker("criterion")
        num, title = mark.args if mark else (0, request.node.name)
        rec.sink.append((num, title, False, "test errored before reaching its check"))


def system_and_cocycle(name):
    cfg = load_fixture(name)
    return SymbolicSystem.from_json(cfg["system"]), CocycleSpec.from_json(cfg["cocycle"]), cfg


@pytest.fixture(scope="session")
def sl2z():
    system, c, _ = system_and_cocycle("sl2z-uniform-walk")
    return system, c


@pytest.fixture(scope="session")
def sl3():
    system, c, _ = system_and_cocycle("sl3-generic")
    return system, c


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
