import math

import numpy as np
import pytest

from mfbsde.types import TimeGrid, InitialCondition, ConvexityParams, EmpiricalLaw
from mfbsde.errors import ValidationError, DimensionError, CapabilityError
from mfbsde.stochastic import BrownianDriver, stream_generator
from mfbsde.coefficients import (
    CoefficientSet, ControlModel, ActionSet, LQModel, lq_control_model, lq_fbsde_coefficients, builtin_model
)
from mfbsde import verification as checks

from conftest import make_solver


def monotone_pair(a: float = -0.5, c: float = 1.75) -> CoefficientSet:
    """B = a·x - c·y, F = c·x + a·y"""

    return CoefficientSet(
        drift=lambda t, x, y, m: a * x - c * y,
        driver=lambda t, x, y, m: c * x + a * y,
        name="monotone-pair"
    )


def constant_cost_model() -> ControlModel:
    return ControlModel(
        drift=lambda t, x, mu, a: 0.0 * x + a,
        cost=lambda t, x, mu, a: 1.0 + 0.0 * (x + a),
        d_x_cost=lambda t, x, mu, a: 0.0 * x,
        d_a_cost=lambda t, x, mu, a: 0.0 * a,
        r=0.5
    )


def test_random_cloud():
    cloud = checks.random_cloud(np.random.default_rng(0), 50)
    assert cloud.shape == (50, 2)
    assert np.all(np.isfinite(cloud))


def test_monotonicity_check_holds_on_monotone_pair():
    report = checks.check_assumption1_mc(monotone_pair(), K=0.5, kappa=1.0)
    assert report.condition_id == "A1-ii"
    assert report.holds
    assert report.margin > 0
    assert report.method == "monte-carlo"
    assert report.samples_used == 200 * 64


def test_monotonicity_check_accepts_the_rotating_family():
    rng = np.random.default_rng(21)

    # the mean of the inequality is at most (K/2 + κ - c)(x̂² + ŷ²)
    for seed in range(100):
        a = float(rng.uniform(-2.0, 2.0))
        c = 0.5 / 2 + 1.0 + float(rng.uniform(0.1, 2.0))
        report = checks.check_assumption1_mc(monotone_pair(a, c), K=0.5, kappa=1.0, seed=seed)
        assert report.holds, (seed, a, c)
        assert report.margin > 0


@pytest.mark.parametrize("name", ["base-case", "anti-monotone"])
def test_monotonicity_check_falsifies(name):
    report = checks.check_assumption1_mc(builtin_model(name), K=0.5, kappa=1.0)
    assert not report.holds
    assert report.margin < 0


def test_monte_carlo_checks_need_enough_pairs():
    with pytest.raises(ValidationError):
        checks.check_assumption1_mc(monotone_pair(), K=0.5, kappa=1.0, n_pairs=50)
    with pytest.raises(ValidationError):
        checks.check_assumption1_lipschitz_mc(monotone_pair(), 3.0, cloud_size=1)


def test_monte_carlo_checks_are_seeded():
    a = checks.check_assumption1_mc(builtin_model("base-case"), K=0.5, kappa=1.0, seed=3)
    b = checks.check_assumption1_mc(builtin_model("base-case"), K=0.5, kappa=1.0, seed=3)
    assert a.margin == b.margin


def test_lipschitz_check():
    coeffs = builtin_model("synthetic-contraction")
    assert checks.check_assumption1_lipschitz_mc(coeffs, 6.0, cloud_size=32).holds

    tight = checks.check_assumption1_lipschitz_mc(coeffs, 1.0, cloud_size=32)
    assert not tight.holds
    assert tight.std_error == 0.0


def test_assumption2_checks_on_synthetic_system():
    coeffs = builtin_model("synthetic-contraction")

    mono = checks.check_assumption2_monotonicity_mc(coeffs, 4.0, 4.0)
    assert mono.condition_id == "A2-i"
    assert mono.holds and mono.margin > 0

    assert not checks.check_assumption2_monotonicity_mc(coeffs, 6.0, 4.0).holds

    lip = checks.check_assumption2_lipschitz_mc(coeffs, 1.0, 1.0, cloud_size=32)
    assert lip.condition_id == "A2-ii"
    assert lip.holds


def test_assumption2_constants():
    report = checks.check_assumption2_constants(5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 0.5)
    assert report.holds
    assert report.method == "arithmetic"
    assert report.contraction_constant == pytest.approx(4 / 35.75)
    assert report.margin == pytest.approx(5.5)

    outside = checks.check_assumption2_constants(5.0, 5.0, 1.0, 1.0, 1.0, 1.0, 7.0)
    assert not outside.holds
    assert outside.contraction_constant is None

    # window is non-empty but the product bound fails
    coupled = checks.check_assumption2_constants(5.0, 5.0, 3.0, 3.0, 0.1, 0.1, 0.0)
    assert not coupled.holds

    with pytest.raises(ValidationError):
        checks.check_assumption2_constants(5.0, 5.0, 1.0, 1.0, 0.0, 1.0, 0.5)
    with pytest.raises(ValidationError):
        checks.check_assumption2_constants(math.nan, 5.0, 1.0, 1.0, 1.0, 1.0, 0.5)


def test_integrability():
    grid = TimeGrid(6.0, 0.02, 0.5)
    report = checks.check_assumption2_integrability(builtin_model("synthetic-contraction"), grid)
    assert report.holds
    assert report.margin == pytest.approx(1e12 - 2 * (1 - math.exp(-3.0)), rel=1e-12)

    explosive = CoefficientSet(
        drift=lambda t, x, y, m: x + np.exp(5.0 * t),
        driver=lambda t, x, y, m: y
    )
    assert not checks.check_assumption2_integrability(explosive, TimeGrid(10.0, 0.1, 0.5)).holds


def test_lq_convexity_params(benchmark):
    grid = TimeGrid(10.0, 0.01)
    primary = checks.lq_convexity_params(benchmark, grid)
    assert (primary.eta, primary.iota, primary.zeta, primary.l) == (0.5, 0.5, 1.0, 0.0)
    assert checks.lq_convexity_params(benchmark, grid, "alternate").l == 1.0

    with pytest.raises(ValidationError):
        checks.lq_convexity_params(benchmark, grid, "sideways")


def test_theorem_conditions_on_benchmark(benchmark):
    grid = TimeGrid(10.0, 0.01)

    mfc = checks.check_theorem31_conditions(benchmark, grid)
    assert mfc.condition_id == "T31-fwd"
    assert mfc.holds
    assert mfc.margin == pytest.approx(0.75)

    mfg = checks.check_theorem32_conditions(benchmark, grid)
    assert mfg.condition_id == "T32-fwd"
    assert mfg.margin == pytest.approx(0.75)

    alt = checks.check_theorem31_conditions(benchmark, grid, "alternate")
    assert alt.condition_id == "T31-alt"
    assert not alt.holds
    assert alt.margin == pytest.approx(-20.75)


def test_alternate_conditions_with_strong_damping():
    m = LQModel.constant(b1=-4.0, b1_bar=0.1, b2=1.0, q=1.0, p=1.0, r=1.0)
    grid = TimeGrid(10.0, 0.01)
    params = ConvexityParams(eta=0.5, iota=0.5, zeta=1.0, l=0.1)

    for check in (checks.check_theorem31_conditions, checks.check_theorem32_conditions):
        report = check(m, grid, "alternate", params)
        assert report.holds
        assert report.margin == pytest.approx(0.8)


def test_theorem_conditions_need_constants():
    model = ControlModel(
        drift=lambda t, x, mu, a: a + 0.0 * x,
        cost=lambda t, x, mu, a: 0.5 * a * a,
        d_x_cost=lambda t, x, mu, a: 0.0 * x,
        d_a_cost=lambda t, x, mu, a: a,
        r=1.0,
        linear_drift=lq_control_model(LQModel.constant(b2=1.0)).linear_drift
    )
    with pytest.raises(ValidationError, match="missing convexity constants"):
        checks.check_theorem31_conditions(model, TimeGrid(1.0, 0.1))

    bounded = ControlModel(
        drift=model.drift, cost=model.cost, d_x_cost=model.d_x_cost, d_a_cost=model.d_a_cost,
        r=1.0, action_set=ActionSet(-1.0, 1.0), linear_drift=model.linear_drift
    )
    params = ConvexityParams(eta=0.5, iota=0.5, zeta=1.0, l=0.0)
    with pytest.raises(CapabilityError):
        checks.check_theorem32_conditions(bounded, TimeGrid(1.0, 0.1), params=params)


def test_assumption3_on_lq_model():
    m = LQModel.constant(b1=-4.0, b1_bar=0.1, b2=1.0, q=1.0, p=1.0, r=1.0)
    a3 = {r.condition_id: r for r in checks.check_assumption3(m, 0.1, TimeGrid(10.0, 0.01))}

    assert a3["A3-i"].holds and a3["A3-i"].margin == pytest.approx(0.0, abs=1e-12)
    assert a3["A3-ii"].holds
    assert a3["A3-iii"].margin == pytest.approx(4.4)

    assert not checks.check_assumption3(m, 0.05, TimeGrid(10.0, 0.01))[0].holds


def test_assumption3_by_sampling():
    model = ControlModel(
        drift=lambda t, x, mu, a: -2.0 * x + 0.5 * np.tanh(mu.mean[0]) + a,
        cost=lambda t, x, mu, a: 0.5 * a * a,
        d_x_cost=lambda t, x, mu, a: 0.0 * x,
        d_a_cost=lambda t, x, mu, a: a,
        r=1.0
    )
    a3 = {r.condition_id: r for r in checks.check_assumption3(model, 0.5, TimeGrid(5.0, 0.1))}

    assert a3["A3-i"].method == "monte-carlo"
    assert a3["A3-i"].holds
    assert a3["A3-iii"].margin == pytest.approx(2.0, abs=1e-9)


def test_mfc_constants_and_alpha_hat_bound(benchmark):
    grid = TimeGrid(10.0, 0.01)
    constants = checks.mfc_to_assumption25_constants(
        benchmark, checks.lq_convexity_params(benchmark, grid), grid
    )
    assert constants.kappa1 == pytest.approx(1.5)
    assert constants.kappa2 == pytest.approx(1.0)
    assert constants.l1 == pytest.approx(0.0)
    assert constants.l2 == pytest.approx(1.0)
    assert (constants.eps1, constants.eps2, constants.K) == (2.0, 2.0, 0.5)

    bound = checks.alpha_hat_lipschitz_bound(ConvexityParams(eta=0.5, iota=0.5, zeta=1.0, l=0.1), 1.0, 0.1)
    assert bound["x"] == pytest.approx(0.1)
    assert bound["y"] == pytest.approx(1.0)
    assert bound["measure_term"] == pytest.approx(0.42)


def test_controls():
    x = np.array([1.0, -2.0])
    mu = EmpiricalLaw(x)
    np.testing.assert_array_equal(checks.zero_control()(0, 0.0, x, mu), 0.0)
    np.testing.assert_array_equal(checks.feedback_control(lambda t, x, mu: -x)(0, 0.0, x, mu), -x)

    actions = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(checks.open_loop_control(actions)(1, 0.1, x, mu), [1.0, 4.0])
    with pytest.raises(DimensionError):
        checks.open_loop_control(actions)(0, 0.0, np.zeros(3), mu)

    bump = checks.Bump(c0=1.0, c1=2.0, c2=3.0, omega=math.pi / 2)
    np.testing.assert_allclose(bump(1.0, x), [6.0, 0.0])

    bounded = ControlModel(
        drift=lambda t, x, mu, a: a + 0.0 * x,
        cost=lambda t, x, mu, a: 0.5 * a * a,
        d_x_cost=lambda t, x, mu, a: 0.0 * x,
        d_a_cost=lambda t, x, mu, a: a,
        r=1.0,
        action_set=ActionSet(-1.0, 1.0)
    )
    clipped = checks.perturbed_control(checks.zero_control(), checks.constant_bump(5.0), 1.0, bounded)
    np.testing.assert_array_equal(clipped(0, 0.0, x, mu), 1.0)

    random = checks.random_bump(stream_generator(1, 2))
    assert 0.0 <= random.omega <= 2.0


def test_estimate_cost_of_constant_running_cost():
    grid = TimeGrid(10.0, 0.01)
    driver = BrownianDriver.generate(0, 20, grid)
    estimate = checks.estimate_cost(
        constant_cost_model(), checks.zero_control(), InitialCondition.deterministic(0.0), grid, driver
    )
    assert estimate.J == pytest.approx(2 * (1 - math.exp(-5.0)), rel=1e-5)
    assert estimate.std_error == pytest.approx(0.0, abs=1e-12)


def test_estimate_cost_of_uncontrolled_lq_state(benchmark):
    grid = TimeGrid(10.0, 0.01)
    driver = BrownianDriver.generate(7, 2000, grid)
    estimate = checks.estimate_cost(
        lq_control_model(benchmark), checks.zero_control(), InitialCondition.deterministic(0.0), grid, driver
    )

    # ∫ e^{-t/2} (1 - e^{-2t}) / 4 dt on [0, 10]
    exact = 0.25 * (2 * (1 - math.exp(-5.0)) - (1 - math.exp(-25.0)) / 2.5)
    assert abs(estimate.J - exact) <= 3 * estimate.std_error + 0.01


def test_estimate_cost_error_is_first_order_in_the_step():
    model = lq_control_model(LQModel.constant(b1=-1.0, b2=1.0, q=1.0, p=1.0, r=0.5, sigma=1e-9))
    xi = InitialCondition.deterministic(1.0)

    # X_t = e^{-t}: ½ ∫ e^{-5t/2} dt on [0, 10]
    exact = (1 - math.exp(-25.0)) / 5

    errors = []
    for dt in (0.02, 0.01):
        grid = TimeGrid(10.0, dt)
        estimate = checks.estimate_cost(model, checks.zero_control(), xi, grid, BrownianDriver.generate(0, 2, grid))
        errors.append(abs(estimate.J - exact))

    assert errors[0] < 0.01
    assert 1.4 <= errors[0] / errors[1] <= 2.6


def test_estimate_cost_rejects_mismatched_driver():
    grid = TimeGrid(1.0, 0.1)
    driver = BrownianDriver.generate(0, 5, TimeGrid(1.0, 0.05))
    with pytest.raises(DimensionError):
        checks.estimate_cost(constant_cost_model(), checks.zero_control(), InitialCondition(), grid, driver)


@pytest.fixture
def picard_solved(benchmark):
    """Converged Picard solve of the mean field control benchmark"""

    solver = make_solver(n_particles=300, horizon=4.0, dt=0.04, seed=9)
    report = solver.picard_solve(lq_fbsde_coefficients(benchmark, "mfc"))
    assert report.converged
    return report, solver.driver, InitialCondition.deterministic(1.0)


def test_optimal_control_has_no_better_neighbour(benchmark, picard_solved):
    solved, driver, xi = picard_solved
    result = checks.optimality_probe(lq_control_model(benchmark), solved, driver, xi, n_perturbations=8, seed=1)

    assert len(result.deltas) == 8
    assert result.worst_delta < 0.01
    assert max(result.deltas) == result.worst_delta


def test_zero_perturbation_changes_nothing(benchmark, picard_solved):
    solved, driver, xi = picard_solved
    result = checks.optimality_probe(lq_control_model(benchmark), solved, driver, xi, n_perturbations=3, epsilon=0.0)

    assert result.deltas == [0.0, 0.0, 0.0]
    assert result.worst_delta == 0.0


def test_shifted_control_costs_more(benchmark, picard_solved):
    solved, driver, xi = picard_solved
    result = checks.optimality_probe(
        lq_control_model(benchmark), solved, driver, xi, bumps=[checks.constant_bump(0.5)], epsilon=1.0
    )

    # c²/2 ∫ e^{-t/2} ((1 - e^{-t})² + 1) dt on [0, 4] with c = 0.5
    assert result.worst_delta == pytest.approx(-0.31608, rel=0.2)
    assert result.worst_delta < -3 * result.std_error


def test_optimality_check_needs_convergence(benchmark, picard_solved):
    solved, driver, xi = picard_solved
    solved.converged = False
    with pytest.raises(ValidationError):
        checks.optimality_probe(lq_control_model(benchmark), solved, driver, xi)
