import pytest

from mfbsde.types import TimeGrid, InitialCondition
from mfbsde.stochastic import BrownianDriver
from mfbsde.solvers import SolverConfig, FBSDESolver
from mfbsde.coefficients import lq_benchmark


def make_solver(
        n_particles: int = 500,
        horizon: float = 4.0,
        dt: float = 0.04,
        K: float = 0.5,
        xi: InitialCondition = InitialCondition.deterministic(1.0),
        seed: int = 11,
        **options
    ) -> FBSDESolver:

    grid = TimeGrid(horizon, dt, K)
    cfg = SolverConfig(grid=grid, n_particles=n_particles, **options)
    driver = BrownianDriver.generate(seed, n_particles, grid)
    return FBSDESolver(cfg, driver, xi)


@pytest.fixture
def benchmark():
    return lq_benchmark()
