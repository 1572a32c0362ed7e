import math

import numpy as np
import pytest

from mfbsde.types import TimeGrid, EmpiricalLaw
from mfbsde.errors import ValidationError, CapabilityError
from mfbsde.coefficients import (
    PiecewiseConstant, ActionSet, ControlModel, CoefficientSet, LQModel,
    lq_benchmark, lq_control_model, lq_fbsde_coefficients, lq_assumption22_constants,
    builtin_model, BUILTIN_NAMES
)


def test_piecewise_constant_is_right_continuous():
    fn = PiecewiseConstant([[0.0, 1.0], [2.0, 3.0]])
    assert fn(0.0) == 1.0
    assert fn(1.999) == 1.0
    assert fn(2.0) == 3.0
    assert fn(100.0) == 3.0
    np.testing.assert_array_equal(fn(np.array([0.5, 2.5])), [1.0, 3.0])
    assert fn.to_list() == [[0.0, 1.0], [2.0, 3.0]]


@pytest.mark.parametrize("breakpoints", [
    [],
    [[1.0, 2.0]],
    [[0.0, 1.0], [0.0, 2.0]],
    [[0.0, math.inf]],
])
def test_piecewise_constant_rejects(breakpoints):
    with pytest.raises(ValidationError):
        PiecewiseConstant(breakpoints)


def test_action_set():
    a = ActionSet(-1.0, 2.0)
    assert a.bounded
    assert a.contains([-1.0, 0.0, 2.0])
    assert not a.contains(2.5)
    np.testing.assert_array_equal(a.clip(np.array([-3.0, 5.0])), [-1.0, 2.0])
    assert ActionSet(1.0, 2.0).anchor() == 1.0
    assert not ActionSet().bounded

    with pytest.raises(ValidationError):
        ActionSet(1.0, 1.0)


def test_lq_model_rejects_non_positive_p():
    with pytest.raises(ValidationError):
        LQModel.constant(b2=1.0, p=0.0)
    with pytest.raises(ValidationError):
        LQModel.constant(b2=1.0, p=1.0, r=0.0)

    m = LQModel(
        b1=PiecewiseConstant.constant(0.0),
        b1_bar=PiecewiseConstant.constant(0.0),
        b2=PiecewiseConstant.constant(1.0),
        q=PiecewiseConstant.constant(1.0),
        q_bar=PiecewiseConstant.constant(0.0),
        p=PiecewiseConstant([[0.0, 1.0], [5.0, 2.0]])
    )
    assert m.at(6.0)["p"] == 2.0
    assert m.to_dict()["p"] == [[0.0, 1.0], [5.0, 2.0]]


def test_benchmark_fbsde_coefficients():
    m = lq_benchmark()
    coeffs = lq_fbsde_coefficients(m, "mfg")
    law = EmpiricalLaw.from_columns([0.0, 2.0], [1.0, 1.0])

    # B = b1 x - (b2²/p) y, F = (b1 - r) y + q x
    assert coeffs.B(0.0, 2.0, 1.0, law) == pytest.approx(-3.0)
    assert coeffs.F(0.0, 2.0, 1.0, law) == pytest.approx(0.5)
    assert coeffs.name == "lq-benchmark-mfg"


def test_mean_field_terms_depend_on_problem():
    m = LQModel.constant(b1=-1.0, b1_bar=0.5, b2=1.0, q=1.0, q_bar=2.0, p=1.0)
    law = EmpiricalLaw.from_columns([1.0, 3.0], [4.0, 0.0])
    game = lq_fbsde_coefficients(m, "mfg")
    control = lq_fbsde_coefficients(m, "mfc")

    assert game.B(0.0, 0.0, 0.0, law) == pytest.approx(1.0)
    # control adds b1_bar · E[Y]
    assert control.F(0.0, 0.0, 0.0, law) - game.F(0.0, 0.0, 0.0, law) == pytest.approx(1.0)

    with pytest.raises(ValidationError):
        lq_fbsde_coefficients(m, "nash")


def test_assumption22_constants():
    grid = TimeGrid(10.0, 0.01)
    constants = lq_assumption22_constants(lq_benchmark(), grid)
    assert constants.kappa == pytest.approx(1.0)
    assert constants.l == pytest.approx(2.5)
    assert constants.K == 0.5

    with pytest.raises(ValidationError):
        lq_assumption22_constants(LQModel.constant(b1=-1.0, q_bar=1.0, b2=1.0, q=1.0), grid)
    with pytest.raises(ValidationError):
        lq_assumption22_constants(LQModel.constant(b1=-1.0, b2=1.0, q=0.0), grid)


def test_lq_control_model_partials_and_minimizer():
    model = lq_control_model(LQModel.constant(b1=-1.0, b2=2.0, q=1.0, q_bar=1.0, p=4.0))
    mu = EmpiricalLaw([0.0, 2.0])

    assert model.cost(0.0, 3.0, mu, 1.0) == pytest.approx(0.5 * (9.0 + 4.0 + 4.0))
    assert model.d_x_cost(0.0, 3.0, mu, 1.0) == pytest.approx(5.0)
    assert model.minimizer(0.0, 3.0, mu, 2.0) == pytest.approx(-1.0)
    assert model.require_linear_drift() is model.linear_drift


def test_control_model_catches_wrong_partial():
    with pytest.raises(ValidationError):
        ControlModel(
            drift=lambda t, x, mu, a: a,
            cost=lambda t, x, mu, a: a * a,
            d_x_cost=lambda t, x, mu, a: 0.0,
            d_a_cost=lambda t, x, mu, a: a,
            r=1.0
        )


def test_missing_linear_drift_is_a_capability_error():
    model = ControlModel(
        drift=lambda t, x, mu, a: np.sin(x) + a,
        cost=lambda t, x, mu, a: 0.5 * a * a,
        d_x_cost=lambda t, x, mu, a: 0.0 * x,
        d_a_cost=lambda t, x, mu, a: a,
        r=1.0
    )
    with pytest.raises(CapabilityError):
        model.require_linear_drift()


def test_coefficient_set_rejects_non_finite():
    with pytest.raises(ValidationError):
        CoefficientSet(drift=lambda t, x, y, m: x + np.inf, driver=lambda t, x, y, m: y)
    with pytest.raises(ValidationError):
        CoefficientSet(drift=lambda t, x, y, m: x, driver=lambda t, x, y, m: y, sigma=0.0)


def test_builtins():
    for name in BUILTIN_NAMES:
        assert builtin_model(name).sigma > 0

    assert builtin_model("synthetic-contraction").assumption25.kappa1 == 5.0
    assert builtin_model("lq-benchmark").assumption22.kappa == pytest.approx(1.0)

    with pytest.raises(ValidationError):
        builtin_model("no-such-model")
