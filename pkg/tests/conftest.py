import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spde_exit.grid import GridSpec, build_operator
from spde_exit.model import allen_cahn
from spde_exit.quasipotential import find_equilibria


def sine(grid, mode=1, amplitude=1.0):
    return grid.field(lambda s: amplitude * np.sin(mode * np.pi * s / grid.length))


@pytest.fixture(scope="session")
def reference():
    """Allen-Cahn on [0, 5] with 199 interior nodes."""
    model = allen_cahn()
    grid = GridSpec(5.0, 199)
    return model, build_operator(model, grid)


@pytest.fixture(scope="session")
def coarse():
    model = allen_cahn()
    grid = GridSpec(5.0, 49)
    return model, build_operator(model, grid)


@pytest.fixture(scope="session")
def reference_equilibria(reference):
    model, op = reference
    s = sine(op.grid)
    eqs = find_equilibria(model, op, [0 * s, s, -s])
    by_label = {e.label: e for e in eqs}
    return eqs, by_label


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
