"""End-to-end checks at desk scale. Run with ``pytest -m slow``."""

import math

import numpy as np
import pytest

from mfbsde.types import TimeGrid, InitialCondition, ConvexityParams
from mfbsde.stochastic import BrownianDriver, weighted_l2_norm
from mfbsde.coefficients import (
    CoefficientSet, LQModel, builtin_model, lq_fbsde_coefficients, lq_control_model, lq_assumption22_constants
)
from mfbsde.lq_oracle import stationary_roots, riccati_solve, lq_fixed_point_gap
from mfbsde import verification as checks

from conftest import make_solver

pytestmark = pytest.mark.slow

TOL = 1e-4


def test_picard_matches_the_riccati_feedback(benchmark):
    solver = make_solver(n_particles=10_000, horizon=10.0, dt=0.01, seed=1)
    report = solver.picard_solve(lq_fbsde_coefficients(benchmark, "mfg"))
    assert report.converged

    ric = riccati_solve(benchmark, solver.grid, 1.0)
    assert lq_fixed_point_gap(report.final, ric, solver.grid) <= 0.05

    eta_star = stationary_roots(benchmark).eta_star
    assert eta_star == pytest.approx(0.350781, abs=1e-6)
    assert abs(report.final.y[:, 0].mean() - (eta_star + ric.chi[0])) <= 0.02


def test_base_case_closed_form():
    solver = make_solver(n_particles=10_000, horizon=10.0, dt=0.01, xi=InitialCondition.gaussian(0.0, 1.0))
    ensemble = solver.solve_lambda0(1.0)

    gap = (ensemble.y - ensemble.x).mean(axis=0)
    se = (ensemble.y - ensemble.x).std(axis=0, ddof=1) / math.sqrt(10_000)
    assert np.all(np.abs(gap) <= 2 * solver.grid.dt + 3 * se)
    assert abs(ensemble.z.mean() - 1.0) <= 0.02


def test_picard_contracts_on_the_synthetic_model():
    solver = make_solver(n_particles=2000, horizon=10.0, dt=0.01, xi=InitialCondition.gaussian(0.0, 1.0))
    report = solver.picard_solve(builtin_model("synthetic-contraction"))

    assert report.converged
    assert report.contraction_ratio_estimate <= 0.5
    deltas = [it.delta_norm for it in report.iterates]
    assert np.all(np.diff(deltas[1:]) <= 0)


def test_uniqueness_check_on_the_benchmark(benchmark):
    solver = make_solver(n_particles=2000, horizon=10.0, dt=0.01, picard_tol=TOL)
    report = solver.uniqueness_probe(lq_fbsde_coefficients(benchmark, "mfg"), n_starts=3)

    assert report.converged_all
    assert report.max_distance <= 10 * TOL


def test_continuation_agrees_with_picard(benchmark):
    grid = TimeGrid(6.0, 0.02, benchmark.r)
    constants = lq_assumption22_constants(benchmark, grid)
    coeffs = lq_fbsde_coefficients(benchmark, "mfg", constants)

    picard = make_solver(n_particles=2000, horizon=6.0, dt=0.02, picard_tol=TOL).picard_solve(coeffs)
    continuation = make_solver(n_particles=2000, horizon=6.0, dt=0.02, picard_tol=TOL).continuation_solve(
        coeffs, constants.kappa, constants.l
    )

    assert picard.converged and continuation.converged
    distance = math.hypot(
        weighted_l2_norm(picard.final.x - continuation.final.x, grid),
        weighted_l2_norm(picard.final.y - continuation.final.y, grid)
    )
    assert distance <= 10 * TOL


def test_picard_control_is_optimal(benchmark):
    solver = make_solver(n_particles=1000, horizon=8.0, dt=0.02)
    solved = solver.picard_solve(lq_fbsde_coefficients(benchmark, "mfc"))
    assert solved.converged

    model = lq_control_model(benchmark)
    xi = InitialCondition.deterministic(1.0)

    result = checks.optimality_probe(model, solved, solver.driver, xi, n_perturbations=20)
    assert len(result.deltas) == 20
    assert result.worst_delta <= 3 * result.std_error

    still = checks.optimality_probe(model, solved, solver.driver, xi, n_perturbations=3, epsilon=0.0)
    assert still.deltas == [0.0, 0.0, 0.0]

    shifted = checks.optimality_probe(
        model, solved, solver.driver, xi, bumps=[checks.constant_bump(0.5)], epsilon=1.0
    )
    # c²/2 ∫ e^{-t/2} ((1 - e^{-t})² + 1) dt on [0, 8] with c = 0.5
    assert shifted.worst_delta == pytest.approx(-0.37418, rel=0.2)
    assert shifted.worst_delta < -3 * shifted.std_error


def test_uncontrolled_cost(benchmark):
    grid = TimeGrid(10.0, 0.01)
    driver = BrownianDriver.generate(4, 10_000, grid)
    estimate = checks.estimate_cost(
        lq_control_model(benchmark), checks.zero_control(), InitialCondition.deterministic(0.0), grid, driver
    )
    assert abs(estimate.J - 0.4) <= 3 * estimate.std_error + 0.01


def test_condition_thresholds():
    grid = TimeGrid(10.0, 0.01)
    params = ConvexityParams(eta=0.5, iota=0.5, zeta=1.0, l=0.1)
    model = LQModel.constant(b1=-3.2, b2=1.0, q=1.0, p=1.0, r=1.0)

    for check in (checks.check_theorem31_conditions, checks.check_theorem32_conditions):
        report = check(model, grid, "alternate", params)
        assert report.margin == pytest.approx(0.0, abs=1e-12)


def _bsde_error(dt: float) -> float:
    solver = make_solver(n_particles=20, horizon=10.0, dt=dt)
    coeffs = CoefficientSet(
        drift=lambda t, x, y, m: -x + 0.0 * y,
        driver=lambda t, x, y, m: 1.0 - y + 0.0 * x,
        sigma=1.0,
        name="affine-driver"
    )
    y, _ = solver.solve_bsde(coeffs, np.zeros((20, solver.grid.n_steps + 1)))
    exact = 1.0 - np.exp(-(solver.grid.T - solver.grid.times))
    return float(np.max(np.abs(y.mean(axis=0) - exact)))


def test_time_step_error_is_first_order():
    assert 1.4 <= _bsde_error(0.02) / _bsde_error(0.01) <= 2.6


def test_standard_error_scales_with_particles(benchmark):
    grid = TimeGrid(10.0, 0.01)
    model = lq_control_model(benchmark)
    xi = InitialCondition.deterministic(0.0)

    small = checks.estimate_cost(model, checks.zero_control(), xi, grid, BrownianDriver.generate(5, 2000, grid))
    large = checks.estimate_cost(model, checks.zero_control(), xi, grid, BrownianDriver.generate(6, 8000, grid))
    assert small.std_error / large.std_error == pytest.approx(2.0, rel=0.3)
