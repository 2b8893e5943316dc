import numpy as np
import pytest

from mfplan.grid import GridSpec
from mfplan.model import ModelSpec
from mfplan.primal import SolverConfig, solve_planning


def gaussian_density(grid, center, sigma):
    mesh = grid.cell_center_mesh()
    center = np.atleast_1d(np.asarray(center, dtype=float))
    rsq = sum((mesh[j] - center[j]) ** 2 for j in range(grid.d))
    m = np.exp(-rsq / (2 * sigma * sigma))
    return m / (m.sum() * grid.dx**grid.d)


def compact_bump(grid, center, width):
    """C^1 bump with exact compact support (for equivariance tests)."""
    xs = grid.x_centers
    m = np.maximum(0.0, 1 - ((xs - center) / width) ** 2) ** 2
    return m / (m.sum() * grid.dx)


@pytest.fixture(scope="session")
def accept_grid():
    return GridSpec(d=1, nt=64, nx=64, R=2.0)


@pytest.fixture(scope="session")
def accept_model():
    # H = |p|^2/2, F = m^2/2
    return ModelSpec(d=1, p_exponent=2.0)


@pytest.fixture(scope="session")
def accept_endpoints(accept_grid):
    m0 = gaussian_density(accept_grid, [-0.5], 0.3)
    m1 = gaussian_density(accept_grid, [0.5], 0.3)
    return m0, m1


@pytest.fixture(scope="session")
def accept_solution(accept_grid, accept_model, accept_endpoints):
    """The shared acceptance run: gaussian -> shifted gaussian at 64x64."""
    m0, m1 = accept_endpoints
    config = SolverConfig(max_iters=2500, stop_gap=1e-9, stop_residual=1e-12,
                          init_strategy="displacement")
    return solve_planning(accept_model, accept_grid, m0, m1, config)


@pytest.fixture(scope="session")
def accept_report(accept_model, accept_solution):
    from mfplan.dual import duality_report

    return duality_report(accept_model, accept_solution)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(d=1, nt=24, nx=32, R=2.0)


@pytest.fixture(scope="session")
def stationary_solution():
    grid = GridSpec(d=1, nt=32, nx=32, R=2.0)
    model = ModelSpec(d=1, p_exponent=2.0)
    mbar = np.full(grid.space_shape, 1.0 / (2 * grid.R))
    config = SolverConfig(max_iters=500, stop_gap=1e-9, stop_residual=1e-12)
    return solve_planning(model, grid, mbar, mbar, config)
