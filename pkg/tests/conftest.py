import numpy as np
import pytest

from bidlab.landscape import landscape_from_atoms, make_price_grid


@pytest.fixture
def pow2_grid():
    # levels 2^-6 .. 2^6, so 0.5 and 2.0 are exact levels
    return make_price_grid(2.0**-6, 2.0**6, 13)


@pytest.fixture
def L2(pow2_grid):
    return landscape_from_atoms(pow2_grid, [0.5, 2.0], [0.5, 0.5])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
