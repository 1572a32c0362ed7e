import math
import logging
from typing import Optional

import numpy as np

from .types import EmpiricalLaw, HamiltonianEval
from .errors import DomainError, CapabilityError
from .coefficients import ControlModel, CoefficientSet, Scalar, evaluate_on

logger = logging.getLogger("mfbsde")

_GOLDEN_ = (math.sqrt(5.0) - 1.0) / 2.0
ARGMIN_TOL = 1e-10


def hamiltonian(
        model: ControlModel,
        t: float,
        x: Scalar,
        mu: EmpiricalLaw,
        a: Scalar,
        y: Scalar,
        r: Optional[float] = None
    ) -> Scalar:
    """Generalized Hamiltonian b·y + f - r·x·y"""

    if not model.action_set.contains(a):
        raise DomainError(
            f"action {a} outside A = [{model.action_set.lo}, {model.action_set.hi}]"
        )

    r = model.r if r is None else r
    return model.drift(t, x, mu, a) * y + model.cost(t, x, mu, a) - r * x * y


def hamiltonian_eval(
        model: ControlModel,
        t: float,
        x: float,
        mu: EmpiricalLaw,
        a: float,
        y: float
    ) -> HamiltonianEval:

    value = float(hamiltonian(model, t, x, mu, a, y))
    return HamiltonianEval(t=t, x=x, y=y, mu=mu, a=a, value=value)


def d_a_hamiltonian(model: ControlModel, t: float, x: Scalar, mu: EmpiricalLaw, a: Scalar, y: Scalar) -> Scalar:
    if model.linear_drift is not None:
        d_a_drift = evaluate_on(model.linear_drift.b2, t)
    else:
        h = 1e-6 * np.maximum(1.0, np.abs(a))
        d_a_drift = (model.drift(t, x, mu, a + h) - model.drift(t, x, mu, a - h)) / (2 * h)

    return model.d_a_cost(t, x, mu, a) + y * d_a_drift


def _bracket(model: ControlModel, t, x, mu, y):
    A = model.action_set
    if A.bounded:
        shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
        return np.full(shape, A.lo), np.full(shape, A.hi)

    if model.convexity is None:
        raise CapabilityError(
            f"model '{model.name}' has no declared convexity in a and an unbounded action set; "
            f"cannot locate the Hamiltonian minimizer"
        )

    # strong convexity with modulus 2η keeps the minimizer within |∂aH(a0)|/(2η) of a0
    a0 = np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, A.anchor())
    radius = np.abs(d_a_hamiltonian(model, t, x, mu, a0, y)) / (2 * model.convexity.eta)
    radius = radius * (1 + 1e-6) + ARGMIN_TOL

    return A.clip(a0 - radius), A.clip(a0 + radius)


def _golden_section(model, t, x, mu, y, lo, hi, rel_width: float = 1e-4):
    width0 = np.max(hi - lo)
    if width0 <= 0:
        return lo, hi

    n_iters = int(math.ceil(math.log(rel_width) / math.log(_GOLDEN_)))
    c = hi - _GOLDEN_ * (hi - lo)
    d = lo + _GOLDEN_ * (hi - lo)
    hc = hamiltonian(model, t, x, mu, c, y)
    hd = hamiltonian(model, t, x, mu, d, y)

    for _ in range(n_iters):
        left = hc < hd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)

        new_c = hi - _GOLDEN_ * (hi - lo)
        new_d = lo + _GOLDEN_ * (hi - lo)
        c, d = new_c, new_d
        hc = hamiltonian(model, t, x, mu, c, y)
        hd = hamiltonian(model, t, x, mu, d, y)

    return lo, hi


def _derivative_bisection(model, t, x, mu, y, lo, hi):
    g_lo = d_a_hamiltonian(model, t, x, mu, lo, y)
    g_hi = d_a_hamiltonian(model, t, x, mu, hi, y)

    # projected: a nonnegative slope at lo pins the minimizer there
    at_lo = g_lo >= 0
    at_hi = g_hi <= 0

    a_lo, a_hi = lo.copy(), hi.copy()
    for _ in range(200):
        if np.max(a_hi - a_lo) <= ARGMIN_TOL:
            break
        mid = 0.5 * (a_lo + a_hi)
        g_mid = d_a_hamiltonian(model, t, x, mu, mid, y)
        rising = g_mid > 0
        a_hi = np.where(rising, mid, a_hi)
        a_lo = np.where(rising, a_lo, mid)

    a = 0.5 * (a_lo + a_hi)
    a = np.where(at_hi, hi, a)
    return np.where(at_lo, lo, a)


def argmin_hamiltonian(
        model: ControlModel,
        t: float,
        x: Scalar,
        mu: EmpiricalLaw,
        y: Scalar
    ) -> Scalar:
    """Minimizer α̂(t, x, μ, y) of the Hamiltonian over A, vectorized over (x, y)"""

    if model.minimizer is not None:
        return model.action_set.clip(model.minimizer(t, x, mu, y))

    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    lo, hi = _bracket(model, t, x, mu, y)
    g_lo, g_hi = _golden_section(model, t, x, mu, y, lo, hi)

    # widen so an interior minimizer stays strictly inside
    pad = g_hi - g_lo
    g_lo = np.maximum(lo, g_lo - pad)
    g_hi = np.minimum(hi, g_hi + pad)

    a = _derivative_bisection(model, t, x, mu, y, g_lo, g_hi)

    return float(a) if scalar else a


def _measure_term(model: ControlModel, t: float, x: Scalar, mu: EmpiricalLaw, m: EmpiricalLaw) -> Scalar:
    """Atom average of ∂_μ f(t, x', μ, α̂(x', y', μ))(x) over (x', y') in m"""

    if model.d_mu_cost is None:
        raise CapabilityError(f"model '{model.name}' does not supply the measure derivative of f")

    x_prime = m.column(0)
    a_prime = argmin_hamiltonian(model, t, x_prime, mu, m.column(1))

    if not model.dmu_f_depends_on_x:
        return float(np.mean(model.d_mu_cost(t, x_prime, mu, a_prime, None)))

    x = np.asarray(x, dtype=float)
    values = model.d_mu_cost(t, x_prime[None, :], mu, a_prime[None, :], x.reshape(-1, 1))
    values = np.mean(values, axis=1)
    return float(values[0]) if x.ndim == 0 else values


def assemble_mfc_coefficients(model: ControlModel) -> CoefficientSet:
    """Mean field control system: B_c = b(α̂), F_c = b1·y + ∂x f(α̂) - r·y + b̄1·ν̄ + Ẽ[∂μ f](x)"""

    linear = model.require_linear_drift()
    if model.d_mu_cost is None:
        raise CapabilityError(f"model '{model.name}' does not supply the measure derivative of f")

    def drift(t, x, y, m):
        mu = m.marginal(0)
        return model.drift(t, x, mu, argmin_hamiltonian(model, t, x, mu, y))

    def driver(t, x, y, m):
        mu = m.marginal(0)
        a = argmin_hamiltonian(model, t, x, mu, y)
        return (
            evaluate_on(linear.b1, t) * y
            + model.d_x_cost(t, x, mu, a)
            - model.r * y
            + evaluate_on(linear.b1_bar, t) * m.mean[1]
            + _measure_term(model, t, x, mu, m)
        )

    return CoefficientSet(drift=drift, driver=driver, sigma=model.sigma, name=f"{model.name}-mfc")


def assemble_mfg_coefficients(model: ControlModel) -> CoefficientSet:
    """Mean field game system: B_g = b(α̂), F_g = b1·y + ∂x f(α̂) - r·y"""

    linear = model.require_linear_drift()

    def drift(t, x, y, m):
        mu = m.marginal(0)
        return model.drift(t, x, mu, argmin_hamiltonian(model, t, x, mu, y))

    def driver(t, x, y, m):
        mu = m.marginal(0)
        a = argmin_hamiltonian(model, t, x, mu, y)
        return evaluate_on(linear.b1, t) * y + model.d_x_cost(t, x, mu, a) - model.r * y

    return CoefficientSet(drift=drift, driver=driver, sigma=model.sigma, name=f"{model.name}-mfg")


def feedback_from_adjoint(model: ControlModel):
    """α̂ as a function (t, x, y, mu) used when simulating optimal controls"""

    def alpha_hat(t, x, y, mu):
        return argmin_hamiltonian(model, t, x, mu, y)

    return alpha_hat
