import numpy as np
import pytest

from bayesfeed.mesh import assemble_fem, build_regular_mesh
from bayesfeed.simulate import sample_independent, simulate_truth

ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def small_mesh():
    mesh = build_regular_mesh(9, 9, 0.25)
    return mesh, assemble_fem(mesh)


@pytest.fixture(scope="session")
def truth_a():
    return simulate_truth("a", 0.4, 0.8, grid_n=20, seed=11, mesh_n=21, extension=0.2)


@pytest.fixture(scope="session")
def sample_a(truth_a):
    return sample_independent(truth_a, 40, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
