import numpy as np
import pytest

from darcytopo.problem import preset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_cavity():
    """Quarter cavity on a coarse 4 x 4 x 8 grid (regions snapped to faces)."""
    return preset("cavity-a1e3", (4, 4, 8))


_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line; it is echoed live and again in the summary."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
