import math
import logging
from dataclasses import dataclass
from typing import Callable, Optional, List, Union, Dict

import numpy as np

from .types import (
    TimeGrid, EmpiricalLaw, InitialCondition, ConditionReport,
    ConvexityParams, CostEstimate, ProbeResult, SolveReport
)
from .errors import ValidationError, DimensionError, DivergenceError, CapabilityError
from .stochastic import BrownianDriver, stream_generator, sample_initial, wasserstein2, ASSIGNMENT_CAP
from .coefficients import (
    CoefficientSet, ControlModel, LQModel, Assumption25,
    lq_control_model, evaluate_on
)
from .pontryagin import feedback_from_adjoint, hamiltonian_eval

logger = logging.getLogger("mfbsde")

_CHECK_STREAM_ = 0xC0FFEE
_PROBE_STREAM_ = 0xB0B
_INTEGRABILITY_BOUND_ = 1e12
_POINTWISE_SLACK_ = 1e-9

# random cloud generator: two-component Gaussian mixtures
_MEAN_RANGE_ = (-3.0, 3.0)
_SCALE_RANGE_ = (0.1, 2.0)
_CORR_RANGE_ = (-0.9, 0.9)

Control = Callable[[int, float, np.ndarray, EmpiricalLaw], np.ndarray]
Model = Union[LQModel, ControlModel]


def random_cloud(rng: np.random.Generator, size: int, n_components: int = 2) -> np.ndarray:
    """(size, 2) atoms from a Gaussian mixture with random means, scales and correlations"""

    means = rng.uniform(*_MEAN_RANGE_, size=(n_components, 2))
    scales = rng.uniform(*_SCALE_RANGE_, size=(n_components, 2))
    corr = rng.uniform(*_CORR_RANGE_, size=n_components)

    k = rng.integers(0, n_components, size=size)
    z1, z2 = rng.standard_normal(size), rng.standard_normal(size)

    x = means[k, 0] + scales[k, 0] * z1
    y = means[k, 1] + scales[k, 1] * (corr[k] * z1 + np.sqrt(1 - corr[k] ** 2) * z2)
    return np.column_stack((x, y))


def _draws(seed: int, n_pairs: int, cloud_size: int, horizon: float):
    rng = stream_generator(seed, _CHECK_STREAM_)
    for _ in range(n_pairs):
        t = float(rng.uniform(0.0, horizon))
        u = random_cloud(rng, cloud_size)
        u_prime = random_cloud(rng, cloud_size)
        yield t, u, u_prime


def _evaluate(fn, t, x, y, m, label: str, draw: int):
    try:
        return np.asarray(fn(t, x, y, m), dtype=float)
    except Exception as e:
        raise type(e)(f"{label} failed on draw {draw} at t={t:.4f}: {e}") from e


def _check_mc_args(n_pairs: int, cloud_size: int, minimum: int = 100):
    if n_pairs < minimum:
        raise ValidationError(f"n_pairs must be >= {minimum}, got {n_pairs}")
    if cloud_size < 2:
        raise ValidationError(f"cloud_size must be >= 2, got {cloud_size}")


def check_assumption1_mc(
        coeffs: CoefficientSet,
        K: float,
        kappa: float,
        n_pairs: int = 200,
        cloud_size: int = 64,
        seed: int = 0,
        horizon: float = 10.0
    ) -> ConditionReport:
    """Monte Carlo falsifier of the monotonicity inequality

        E[-K X̂Ŷ - X̂(F(t,U) - F(t,U')) + Ŷ(B(t,U) - B(t,U'))] + κE[X̂² + Ŷ²] <= 0

    over random coupled clouds U = (X, Y), U' = (X', Y'). The condition quantifies over all
    square-integrable pairs, so a pass only means no violation was witnessed.
    """

    _check_mc_args(n_pairs, cloud_size)

    worst, worst_se = -math.inf, 0.0
    for draw, (t, u, u_prime) in enumerate(_draws(seed, n_pairs, cloud_size, horizon)):
        m, m_prime = EmpiricalLaw(u), EmpiricalLaw(u_prime)
        x, y = u[:, 0], u[:, 1]
        xp, yp = u_prime[:, 0], u_prime[:, 1]
        dx, dy = x - xp, y - yp

        d_f = _evaluate(coeffs.F, t, x, y, m, "driver F", draw) - _evaluate(coeffs.F, t, xp, yp, m_prime, "driver F", draw)
        d_b = _evaluate(coeffs.B, t, x, y, m, "drift B", draw) - _evaluate(coeffs.B, t, xp, yp, m_prime, "drift B", draw)

        values = -K * dx * dy - dx * d_f + dy * d_b + kappa * (dx ** 2 + dy ** 2)
        lhs = float(np.mean(values))
        if lhs > worst:
            worst = lhs
            worst_se = float(np.std(values, ddof=1) / math.sqrt(cloud_size))

    margin = -worst
    return ConditionReport(
        condition_id="A1-ii",
        holds=margin + 2 * worst_se >= 0,
        margin=margin,
        method="monte-carlo",
        samples_used=n_pairs * cloud_size,
        std_error=worst_se
    )


def check_assumption1_lipschitz_mc(
        coeffs: CoefficientSet,
        l: float,
        n_pairs: int = 100,
        cloud_size: int = 64,
        seed: int = 0,
        horizon: float = 10.0
    ) -> ConditionReport:
    """|B(U) - B(U')| + |F(U) - F(U')| <= l(|x̂| + |ŷ| + W2(m, m')) on random clouds"""

    _check_mc_args(n_pairs, cloud_size)
    if cloud_size > ASSIGNMENT_CAP:
        raise ValidationError(f"cloud_size must be <= {ASSIGNMENT_CAP} for the joint-law distance")

    worst = -math.inf
    for draw, (t, u, u_prime) in enumerate(_draws(seed, n_pairs, cloud_size, horizon)):
        m, m_prime = EmpiricalLaw(u), EmpiricalLaw(u_prime)
        x, y = u[:, 0], u[:, 1]
        xp, yp = u_prime[:, 0], u_prime[:, 1]
        w2 = wasserstein2(m, m_prime)

        gap = (
            np.abs(_evaluate(coeffs.B, t, x, y, m, "drift B", draw) - _evaluate(coeffs.B, t, xp, yp, m_prime, "drift B", draw))
            + np.abs(_evaluate(coeffs.F, t, x, y, m, "driver F", draw) - _evaluate(coeffs.F, t, xp, yp, m_prime, "driver F", draw))
        )
        values = gap - l * (np.abs(x - xp) + np.abs(y - yp) + w2)
        worst = max(worst, float(np.max(values)))

    margin = -worst
    return ConditionReport(
        condition_id="A1-i",
        holds=margin >= -_POINTWISE_SLACK_,
        margin=margin,
        method="monte-carlo",
        samples_used=n_pairs * cloud_size,
        std_error=0.0
    )


def check_assumption2_monotonicity_mc(
        coeffs: CoefficientSet,
        kappa1: float,
        kappa2: float,
        n_pairs: int = 100,
        cloud_size: int = 64,
        seed: int = 0,
        horizon: float = 10.0
    ) -> ConditionReport:
    """E[(Y - Y')(F(x,Y,m) - F(x,Y',m))] <= -κ1E[Ŷ²] and E[(X - X')(B(X,y,m) - B(X',y,m))] <= -κ2E[X̂²]"""

    _check_mc_args(n_pairs, cloud_size)

    worst, worst_se = -math.inf, 0.0
    for draw, (t, u, u_prime) in enumerate(_draws(seed, n_pairs, cloud_size, horizon)):
        m = EmpiricalLaw(u)
        x, y = u[:, 0], u[:, 1]
        xp, yp = u_prime[:, 0], u_prime[:, 1]

        d_f = _evaluate(coeffs.F, t, x, y, m, "driver F", draw) - _evaluate(coeffs.F, t, x, yp, m, "driver F", draw)
        d_b = _evaluate(coeffs.B, t, x, y, m, "drift B", draw) - _evaluate(coeffs.B, t, xp, y, m, "drift B", draw)

        for values in ((y - yp) * d_f + kappa1 * (y - yp) ** 2, (x - xp) * d_b + kappa2 * (x - xp) ** 2):
            lhs = float(np.mean(values))
            if lhs > worst:
                worst = lhs
                worst_se = float(np.std(values, ddof=1) / math.sqrt(cloud_size))

    margin = -worst
    return ConditionReport(
        condition_id="A2-i",
        holds=margin + 2 * worst_se >= -_POINTWISE_SLACK_,
        margin=margin,
        method="monte-carlo",
        samples_used=n_pairs * cloud_size,
        std_error=worst_se
    )


def check_assumption2_lipschitz_mc(
        coeffs: CoefficientSet,
        l1: float,
        l2: float,
        n_pairs: int = 100,
        cloud_size: int = 64,
        seed: int = 0,
        horizon: float = 10.0
    ) -> ConditionReport:
    """|F(x,y,m) - F(x',y,m')| <= l1(|x̂| + W2) and |B(x,y,m) - B(x,y',m')| <= l2(|ŷ| + W2)"""

    _check_mc_args(n_pairs, cloud_size)
    if cloud_size > ASSIGNMENT_CAP:
        raise ValidationError(f"cloud_size must be <= {ASSIGNMENT_CAP} for the joint-law distance")

    worst = -math.inf
    for draw, (t, u, u_prime) in enumerate(_draws(seed, n_pairs, cloud_size, horizon)):
        m, m_prime = EmpiricalLaw(u), EmpiricalLaw(u_prime)
        x, y = u[:, 0], u[:, 1]
        xp, yp = u_prime[:, 0], u_prime[:, 1]
        w2 = wasserstein2(m, m_prime)

        d_f = np.abs(_evaluate(coeffs.F, t, x, y, m, "driver F", draw) - _evaluate(coeffs.F, t, xp, y, m_prime, "driver F", draw))
        d_b = np.abs(_evaluate(coeffs.B, t, x, y, m, "drift B", draw) - _evaluate(coeffs.B, t, x, yp, m_prime, "drift B", draw))

        worst = max(
            worst,
            float(np.max(d_f - l1 * (np.abs(x - xp) + w2))),
            float(np.max(d_b - l2 * (np.abs(y - yp) + w2)))
        )

    margin = -worst
    return ConditionReport(
        condition_id="A2-ii",
        holds=margin >= -_POINTWISE_SLACK_,
        margin=margin,
        method="monte-carlo",
        samples_used=n_pairs * cloud_size,
        std_error=0.0
    )


def check_assumption2_constants(
        kappa1: float,
        kappa2: float,
        l1: float,
        l2: float,
        eps1: float,
        eps2: float,
        K: float
    ) -> ConditionReport:
    """-2κ2 + 2l2 + 2l2ε2 < K < 2κ1 - 2l1 - 2l1ε1 and 4l1l2 <= ε1ε2(upper - K)(K - lower)"""

    constants = dict(kappa1=kappa1, kappa2=kappa2, l1=l1, l2=l2, eps1=eps1, eps2=eps2, K=K)
    for name, value in constants.items():
        if not math.isfinite(value):
            raise ValidationError(f"{name} must be finite, got {value}")
    if eps1 <= 0 or eps2 <= 0:
        raise ValidationError(f"eps1 and eps2 must be > 0, got {eps1}, {eps2}")

    lower = -2 * kappa2 + 2 * l2 + 2 * l2 * eps2
    upper = 2 * kappa1 - 2 * l1 - 2 * l1 * eps1

    slack_lower = K - lower
    slack_upper = upper - K
    product = eps1 * eps2 * slack_upper * slack_lower
    slack_product = product - 4 * l1 * l2

    holds = slack_lower > 0 and slack_upper > 0 and slack_product >= 0
    contraction = 4 * l1 * l2 / product if slack_lower > 0 and slack_upper > 0 else None

    return ConditionReport(
        condition_id="A2-iii",
        holds=holds,
        margin=min(slack_lower, slack_upper, slack_product),
        method="arithmetic",
        contraction_constant=contraction
    )


def check_assumption2_integrability(coeffs: CoefficientSet, grid: TimeGrid) -> ConditionReport:
    """‖F(·, 0, 0, δ0)‖²_K + ‖B(·, 0, 0, δ0)‖²_K on the truncated grid"""

    origin = EmpiricalLaw(np.zeros((1, 2)))
    f_values = np.array([float(np.asarray(coeffs.F(t, 0.0, 0.0, origin))) for t in grid.times])
    b_values = np.array([float(np.asarray(coeffs.B(t, 0.0, 0.0, origin))) for t in grid.times])

    total = float(grid.weights @ (f_values ** 2 + b_values ** 2))
    if not math.isfinite(total):
        total = math.inf

    return ConditionReport(
        condition_id="A2-iv",
        holds=total < _INTEGRABILITY_BOUND_,
        margin=_INTEGRABILITY_BOUND_ - total,
        method="arithmetic",
        samples_used=grid.n_steps + 1
    )


def _drift_terms(model: Model, grid: TimeGrid) -> Dict[str, np.ndarray]:
    if isinstance(model, LQModel):
        return model.on(grid)

    linear = model.require_linear_drift()
    return dict(
        b1=evaluate_on(linear.b1, grid.times),
        b1_bar=evaluate_on(linear.b1_bar, grid.times),
        b2=evaluate_on(linear.b2, grid.times)
    )


def lq_convexity_params(m: LQModel, grid: TimeGrid, variant: str = "primary") -> ConvexityParams:
    """η = min p/2, ζ = max p, ι = min q/2; l covers b̄1 and q̄ (primary) or b̄1 and q + q̄ (alternate)"""

    if variant not in ("primary", "alternate"):
        raise ValidationError(f"variant must be 'primary' or 'alternate', got '{variant}'")

    values = m.on(grid)
    if variant == "primary":
        l = np.maximum(np.abs(values["b1_bar"]), np.abs(values["q_bar"]))
    else:
        l = np.maximum(np.abs(values["b1_bar"]), np.abs(values["q"]) + np.abs(values["q_bar"]))

    return ConvexityParams(
        eta=float(np.min(values["p"])) / 2,
        iota=float(np.min(values["q"])) / 2,
        zeta=float(np.max(values["p"])),
        l=float(np.max(l))
    )


def _resolve_params(
        model: Model,
        grid: TimeGrid,
        variant: str,
        params: Optional[ConvexityParams],
        needed: List[str]
    ) -> ConvexityParams:

    if params is not None:
        return params
    if isinstance(model, LQModel):
        return lq_convexity_params(model, grid, variant)
    if model.convexity is not None:
        return model.convexity

    raise ValidationError(f"missing convexity constants: {', '.join(needed)}")


def _require_unbounded_actions(model: Model, condition_id: str):
    if isinstance(model, ControlModel) and (
            math.isfinite(model.action_set.lo) or math.isfinite(model.action_set.hi)):
        raise CapabilityError(f"{condition_id} applies only to the action set A = R")


def _discount(model: Model) -> float:
    return model.r


def check_theorem31_conditions(
        model: Model,
        grid: TimeGrid,
        variant: str = "primary",
        params: Optional[ConvexityParams] = None
    ) -> ConditionReport:
    """Sufficient conditions for the mean field control system.

    primary:   inf_t min{2ι - 13l/2 - (5l² + 3|b2|l)/(2η), 2b2²η/ζ² - 3l/2 - (l² + 2|b2|l)/(2η)} > r/2
    alternate: max_t b1 <= -max{9l - r/2 + max_t (9l² + 4l|b2|)/(2η), 3l - r/2 + max_t (4|b2|l + 3b2²)/(2η)}
    """

    if variant not in ("primary", "alternate"):
        raise ValidationError(f"variant must be 'primary' or 'alternate', got '{variant}'")

    p = _resolve_params(model, grid, variant, params, ["eta", "iota", "zeta", "l"])
    terms = _drift_terms(model, grid)
    b1, b2 = terms["b1"], np.abs(terms["b2"])
    r, l, eta = _discount(model), p.l, p.eta

    if variant == "primary":
        _require_unbounded_actions(model, "T31-fwd")
        first = 2 * p.iota - 13 * l / 2 - (5 * l ** 2 + 3 * b2 * l) / (2 * eta)
        second = 2 * b2 ** 2 * eta / p.zeta ** 2 - 3 * l / 2 - (l ** 2 + 2 * b2 * l) / (2 * eta)
        margin = float(np.min(np.minimum(first, second))) - r / 2
        return ConditionReport("T31-fwd", margin > 0, margin, "arithmetic", samples_used=grid.n_steps + 1)

    threshold = -max(
        9 * l - r / 2 + float(np.max((9 * l ** 2 + 4 * l * b2) / (2 * eta))),
        3 * l - r / 2 + float(np.max((4 * b2 * l + 3 * b2 ** 2) / (2 * eta)))
    )
    margin = threshold - float(np.max(b1))
    return ConditionReport("T31-alt", margin >= 0, margin, "arithmetic", samples_used=grid.n_steps + 1)


def check_theorem32_conditions(
        model: Model,
        grid: TimeGrid,
        variant: str = "primary",
        params: Optional[ConvexityParams] = None
    ) -> ConditionReport:
    """Sufficient conditions for the mean field game system.

    primary:   inf_t min{2ι - 3l/2 - l²/η - 3|b2|l/(4η), 2b2²η/ζ² - l/2 - 3|b2|l/(4η)} >= r/2
    alternate: max_t b1 <= -max{3l - r/2 + max_t (3l² + |b2|l)/(2η), 3l - r/2 + max_t (4|b2|l + 3b2²)/(2η)}
    """

    if variant not in ("primary", "alternate"):
        raise ValidationError(f"variant must be 'primary' or 'alternate', got '{variant}'")

    p = _resolve_params(model, grid, variant, params, ["eta", "iota", "zeta", "l"])
    terms = _drift_terms(model, grid)
    b1, b2 = terms["b1"], np.abs(terms["b2"])
    r, l, eta = _discount(model), p.l, p.eta

    if variant == "primary":
        _require_unbounded_actions(model, "T32-fwd")
        first = 2 * p.iota - 3 * l / 2 - l ** 2 / eta - 3 * b2 * l / (4 * eta)
        second = 2 * b2 ** 2 * eta / p.zeta ** 2 - l / 2 - 3 * b2 * l / (4 * eta)
        margin = float(np.min(np.minimum(first, second))) - r / 2
        return ConditionReport("T32-fwd", margin >= 0, margin, "arithmetic", samples_used=grid.n_steps + 1)

    threshold = -max(
        3 * l - r / 2 + float(np.max((3 * l ** 2 + b2 * l) / (2 * eta))),
        3 * l - r / 2 + float(np.max((4 * b2 * l + 3 * b2 ** 2) / (2 * eta)))
    )
    margin = threshold - float(np.max(b1))
    return ConditionReport("T32-alt", margin >= 0, margin, "arithmetic", samples_used=grid.n_steps + 1)


def check_assumption3(
        model: Model,
        l: float,
        grid: TimeGrid,
        n_pairs: int = 100,
        cloud_size: int = 64,
        seed: int = 0
    ) -> List[ConditionReport]:
    """Structural conditions on the control data: W2-Lipschitz drift in μ, integrability at the origin,
    and drift monotonicity κ > l - r/2"""

    control = lq_control_model(model) if isinstance(model, LQModel) else model
    r = control.r
    reports = []

    # Lipschitz in the measure
    if control.linear_drift is not None:
        b1_bar = evaluate_on(control.linear_drift.b1_bar, grid.times)
        margin = l - float(np.max(np.abs(b1_bar)))
        reports.append(ConditionReport("A3-i", margin >= 0, margin, "arithmetic", samples_used=grid.n_steps + 1))
    else:
        rng = stream_generator(seed, _CHECK_STREAM_, 3)
        worst = -math.inf
        for _ in range(n_pairs):
            t = float(rng.uniform(0.0, grid.T))
            mu = EmpiricalLaw(random_cloud(rng, cloud_size)[:, 0])
            mu_prime = EmpiricalLaw(random_cloud(rng, cloud_size)[:, 0])
            x = rng.normal(0.0, 2.0, size=cloud_size)
            a = control.action_set.clip(rng.normal(0.0, 2.0, size=cloud_size))
            gap = np.abs(control.drift(t, x, mu, a) - control.drift(t, x, mu_prime, a))
            worst = max(worst, float(np.max(gap - l * wasserstein2(mu, mu_prime))))
        reports.append(ConditionReport(
            "A3-i", -worst >= -_POINTWISE_SLACK_, -worst, "monte-carlo",
            samples_used=n_pairs * cloud_size, std_error=0.0
        ))

    # integrability at (x, μ, a) = (0, δ0, a0)
    origin = EmpiricalLaw(np.zeros(1))
    a0 = control.action_set.anchor()
    b_values = np.array([float(np.asarray(control.drift(t, 0.0, origin, a0))) for t in grid.times])
    f_values = np.array([float(np.asarray(control.cost(t, 0.0, origin, a0))) for t in grid.times])
    weights = grid.with_discount(r).weights
    total = float(weights @ (b_values ** 2 + np.abs(f_values)))
    if not math.isfinite(total):
        total = math.inf
    reports.append(ConditionReport(
        "A3-ii", total < _INTEGRABILITY_BOUND_, _INTEGRABILITY_BOUND_ - total, "arithmetic",
        samples_used=grid.n_steps + 1
    ))

    # monotonicity of the drift in x
    if control.linear_drift is not None:
        kappa = -float(np.max(evaluate_on(control.linear_drift.b1, grid.times)))
        method, samples = "arithmetic", grid.n_steps + 1
    else:
        rng = stream_generator(seed, _CHECK_STREAM_, 4)
        t = rng.uniform(0.0, grid.T, size=n_pairs)
        x, xp = rng.normal(0.0, 2.0, size=(2, n_pairs))
        a = control.action_set.clip(rng.normal(0.0, 2.0, size=n_pairs))
        mu = EmpiricalLaw(random_cloud(rng, cloud_size)[:, 0])
        slopes = [
            (x[k] - xp[k]) * (control.drift(t[k], x[k], mu, a[k]) - control.drift(t[k], xp[k], mu, a[k]))
            / (x[k] - xp[k]) ** 2
            for k in range(n_pairs)
        ]
        kappa = -float(np.max(slopes))
        method, samples = "monte-carlo", n_pairs

    margin = kappa - (l - r / 2)
    reports.append(ConditionReport(
        "A3-iii", margin > 0, margin, method, samples_used=samples,
        std_error=0.0 if method == "monte-carlo" else None
    ))
    return reports


def mfc_to_assumption25_constants(model: Model, params: ConvexityParams, grid: TimeGrid) -> Assumption25:
    """Monotonicity and Lipschitz constants of the mean field control system, with ε1 = ε2 = 2 and K = r"""

    terms = _drift_terms(model, grid)
    b1, b2 = terms["b1"], np.abs(terms["b2"])
    l, eta, r = params.l, params.eta, model.r

    return Assumption25(
        kappa1=-float(np.max(b1 - r + b2 * l / (2 * eta))),
        kappa2=-float(np.max(b1 + b2 * l / (2 * eta))),
        l1=float(np.max(3 * l + (3 * l ** 2 + b2 * l) / (2 * eta))),
        l2=float(np.max(l + b2 * l / (2 * eta) + b2 ** 2 / (2 * eta))),
        eps1=2.0,
        eps2=2.0,
        K=r
    )


def alpha_hat_lipschitz_bound(params: ConvexityParams, b2: float, b1_bar: float = 0.0) -> Dict[str, float]:
    """Lipschitz constants of α̂ in (x, y, μ) and of the measure term of the mean field control driver"""

    l, eta = params.l, params.eta
    return dict(
        x=l / (2 * eta),
        y=abs(b2) / (2 * eta),
        measure=l / (2 * eta),
        measure_term=abs(b1_bar) + l * (4 * eta + 2 * l + abs(b2)) / (2 * eta)
    )


def zero_control() -> Control:
    return feedback_control(lambda t, x, mu: 0.0)


def feedback_control(fn: Callable[[float, np.ndarray, EmpiricalLaw], np.ndarray]) -> Control:
    def control(i, t, x, mu):
        return np.asarray(fn(t, x, mu), dtype=float) + np.zeros_like(x)
    return control


def open_loop_control(actions: np.ndarray) -> Control:
    actions = np.asarray(actions, dtype=float)

    def control(i, t, x, mu):
        if actions.shape[0] != np.shape(x)[0]:
            raise DimensionError(
                f"open-loop actions for {actions.shape[0]} particles, state has {np.shape(x)[0]}"
            )
        return actions[:, i]
    return control


@dataclass(frozen=True)
class Bump:
    """Feedback perturbation β(t, x) = c0 + c1·x + c2·sin(ωt)"""

    c0: float
    c1: float = 0.0
    c2: float = 0.0
    omega: float = 0.0

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.c0 + self.c1 * x + self.c2 * math.sin(self.omega * t)


def random_bump(rng: np.random.Generator) -> Bump:
    c0, c1, c2 = rng.standard_normal(3) / math.sqrt(3)
    return Bump(c0=float(c0), c1=float(c1), c2=float(c2), omega=float(rng.uniform(0.0, 2.0)))


def constant_bump(c: float) -> Bump:
    return Bump(c0=c)


def perturbed_control(control: Control, bump: Bump, epsilon: float, model: ControlModel) -> Control:
    def perturbed(i, t, x, mu):
        return model.action_set.clip(control(i, t, x, mu) + epsilon * bump(t, x))
    return perturbed


def estimate_cost(
        model: ControlModel,
        control: Control,
        xi_spec: InitialCondition,
        grid: TimeGrid,
        driver: BrownianDriver,
        measure_flow: Optional[np.ndarray] = None
    ) -> CostEstimate:
    """Monte Carlo estimate of E ∫_0^T e^{-rt} f(t, X_t, L(X_t), α_t) dt along the controlled state.

    With ``measure_flow`` the law argument is read from those frozen paths instead of the
    simulated cloud, which is the representative-player cost of a mean field game.
    """

    if driver.n_steps != grid.n_steps:
        raise DimensionError(f"driver has {driver.n_steps} steps, grid has {grid.n_steps}")
    if measure_flow is not None and np.shape(measure_flow)[1] != grid.n_steps + 1:
        raise DimensionError("measure flow does not live on the grid")

    n, dt = grid.n_steps, grid.dt
    weights = grid.with_discount(model.r).weights

    x = sample_initial(xi_spec, driver.n_particles, driver.seed)
    per_particle = np.zeros(driver.n_particles)

    for i, t in enumerate(grid.times):
        mu = EmpiricalLaw(x) if measure_flow is None else EmpiricalLaw(measure_flow[:, i])
        a = control(i, t, x, mu)
        per_particle += weights[i] * model.cost(t, x, mu, a)

        if i < n:
            x = x + model.drift(t, x, mu, a) * dt + model.sigma * driver.increments[:, i]
            if not np.all(np.isfinite(x)):
                raise DivergenceError("controlled state is not finite", step=i + 1)

    J = float(np.mean(per_particle))
    std_error = float(np.std(per_particle, ddof=1) / math.sqrt(per_particle.size)) if per_particle.size > 1 else 0.0
    return CostEstimate(J=J, std_error=std_error, per_particle=per_particle)


def optimal_control(model: ControlModel, solved: SolveReport) -> Control:
    """α̂ along the solved (X, Y), as an open-loop ensemble of actions"""

    final = solved.final
    alpha_hat = feedback_from_adjoint(model)
    actions = np.empty_like(final.x)
    for i, t in enumerate(final.grid.times):
        actions[:, i] = alpha_hat(t, final.x[:, i], final.y[:, i], EmpiricalLaw(final.x[:, i]))
    return open_loop_control(actions)


def optimality_probe(
        model: ControlModel,
        solved: SolveReport,
        driver: BrownianDriver,
        xi_spec: InitialCondition,
        n_perturbations: int = 20,
        seed: int = 0,
        epsilon: float = 0.1,
        problem: str = "mfc",
        bumps: Optional[List[Bump]] = None
    ) -> ProbeResult:
    """Worst ΔJ = J(α̂) - J(α̂ + εβ) over feedback bumps β under common random numbers.

    For the mean field game the measure flow is frozen at the solved L(X_t). A positive
    worst ΔJ beyond the standard error witnesses a better control; a suboptimal α̂ shows up
    as a negative ΔJ beyond the standard error for every bump.
    """

    if not solved.converged or solved.final is None:
        raise ValidationError("optimality probe needs a converged solve")
    if problem not in ("mfc", "mfg"):
        raise ValidationError(f"problem must be 'mfc' or 'mfg', got '{problem}'")

    grid = solved.final.grid
    flow = solved.final.x if problem == "mfg" else None

    base = optimal_control(model, solved)

    x0, y0 = solved.final.x[:, 0], solved.final.y[:, 0]
    start = hamiltonian_eval(
        model, 0.0, float(x0.mean()), EmpiricalLaw(x0), float(np.mean(base(0, 0.0, x0, None))), float(y0.mean())
    )
    logger.debug(f"Hamiltonian of α̂ at the initial mean state: {start.value:.6g}")

    if bumps is None:
        rng = stream_generator(seed, _PROBE_STREAM_)
        bumps = [random_bump(rng) for _ in range(n_perturbations)]

    base_cost = estimate_cost(model, base, xi_spec, grid, driver, flow)

    deltas, std_errors = [], []
    for k, bump in enumerate(bumps):
        cost = estimate_cost(model, perturbed_control(base, bump, epsilon, model), xi_spec, grid, driver, flow)
        diff = base_cost.per_particle - cost.per_particle
        deltas.append(float(np.mean(diff)))
        std_errors.append(float(np.std(diff, ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0)
        logger.debug(f"Optimality probe bump {k}: delta J={deltas[-1]:.3e} (se {std_errors[-1]:.1e})")

    worst = int(np.argmax(deltas))
    logger.info(f"Optimality probe: worst delta J={deltas[worst]:.3e} over {len(bumps)} perturbations")

    return ProbeResult(
        worst_delta=deltas[worst],
        std_error=std_errors[worst],
        deltas=deltas,
        std_errors=std_errors,
        base_cost=base_cost.J
    )
