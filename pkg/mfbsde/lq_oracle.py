import math
import logging
from typing import Tuple, Callable, Optional

import numpy as np
import pandas as pd
from scipy.linalg import solve_continuous_are

from .types import TimeGrid, InitialCondition, ParticleEnsemble, RiccatiSolution, StationaryRoots
from .errors import ValidationError, DimensionError, DivergenceError, NoRealRootError, InfeasibilityError
from .stochastic import BrownianDriver, sample_initial, weighted_l2_norm
from .coefficients import LQModel

logger = logging.getLogger("mfbsde")

ROOT_RULE = "admissible-stable"
BLOW_UP = 1e6


def _check_problem(problem: str):
    if problem not in ("mfc", "mfg"):
        raise ValidationError(f"problem must be 'mfc' or 'mfg', got '{problem}'")


def _mean_feedback(values: dict, problem: str) -> float:
    """Linear coefficient of the mean equation: 2b1 + b̄1 - r (game) or 2b1 + 2b̄1 - r (control)"""

    b1_bar = values["b1_bar"] if problem == "mfg" else 2 * values["b1_bar"]
    return 2 * values["b1"] + b1_bar - values["r"]


def _coefficients(m: LQModel, t: float) -> dict:
    values = {name: float(v) for name, v in m.at(t).items()}
    values["r"] = m.r
    return values


def _quadratic_root(gain: float, linear: float, constant: float, label: str) -> Tuple[float, str]:
    """Admissible root of gain·η² - linear·η - constant = 0 with gain > 0.

    Admissible roots lie at or above the vertex linear/(2·gain); the closed loop is
    most stable at the larger root, so that branch is returned.
    """

    disc = linear * linear + 4 * gain * constant
    if disc < 0:
        raise NoRealRootError(f"{label}: discriminant {disc:.6g} < 0, no real stationary root")

    vertex = linear / (2 * gain)
    sq = math.sqrt(disc)

    # cancellation-free pair of roots
    if linear >= 0:
        big = (linear + sq) / (2 * gain)
        small = -constant / (gain * big) if big != 0 else vertex
    else:
        small = (linear - sq) / (2 * gain)
        big = -constant / (gain * small) if small != 0 else vertex

    admissible = [root for root in (big, small) if root >= vertex - 1e-12 * max(1.0, abs(vertex))]
    if not admissible:
        raise InfeasibilityError(f"{label}: no stationary root satisfies eta >= {vertex:.6g}")

    return max(admissible), ("admissible" if len(admissible) == 1 or big == small else ROOT_RULE)


def _stabilizing_root(a: float, b2: float, p: float, q: float, label: str) -> Tuple[float, str]:
    """Root of -(b2²/p)η² + 2aη + q = 0 via the scalar algebraic Riccati equation,
    with the quadratic formula as fallback"""

    gain = b2 * b2 / p
    try:
        care = float(solve_continuous_are(
            np.array([[a]]), np.array([[b2]]), np.array([[q]]), np.array([[p]])
        )[0, 0])
    except (np.linalg.LinAlgError, ValueError, TypeError) as e:
        logger.debug(f"{label}: Riccati solver failed ({e}), using the quadratic formula")
        return _quadratic_root(gain, 2 * a, q, label)

    residual = gain * care * care - 2 * a * care - q
    if math.isfinite(care) and abs(residual) <= 1e-10 * max(1.0, abs(q), gain * care * care) and care >= a / gain:
        return care, "admissible"

    logger.debug(f"{label}: Riccati solution {care} rejected (residual {residual:.3e})")
    return _quadratic_root(gain, 2 * a, q, label)


def stationary_roots(m: LQModel, t: float = 0.0, problem: str = "mfg") -> StationaryRoots:
    """Stationary points of the η and η̄ Riccati equations with coefficients frozen at t"""

    _check_problem(problem)
    values = _coefficients(m, t)
    if values["b2"] == 0:
        raise ValidationError("stationary roots need b2 != 0")

    b2, p = values["b2"], values["p"]

    eta, rule = _stabilizing_root(
        values["b1"] - values["r"] / 2, b2, p, values["q"] + values["q_bar"], "eta"
    )
    eta_bar, rule_bar = _stabilizing_root(
        _mean_feedback(values, problem) / 2, b2, p, values["q"], "eta_bar"
    )

    rule = ROOT_RULE if ROOT_RULE in (rule, rule_bar) else "admissible"
    return StationaryRoots(eta_star=eta, eta_bar_star=eta_bar, rule=rule)


def _rk4(rhs: Callable[[float, float], float], t: float, v: float, h: float) -> float:
    k1 = rhs(t, v)
    k2 = rhs(t + h / 2, v + h * k1 / 2)
    k3 = rhs(t + h / 2, v + h * k2 / 2)
    k4 = rhs(t + h, v + h * k3)
    return v + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6


def _integrate_backward(rhs, grid: TimeGrid, terminal: float, label: str) -> np.ndarray:
    times, dt = grid.times, grid.dt
    values = np.empty(grid.n_steps + 1)
    values[-1] = terminal

    for i in range(grid.n_steps - 1, -1, -1):
        values[i] = _rk4(rhs, times[i + 1], values[i + 1], -dt)
        if not (math.isfinite(values[i]) and abs(values[i]) <= BLOW_UP):
            raise DivergenceError(
                f"{label} blows up on [{times[i]:.4f}, {times[i + 1]:.4f}]", step=(float(times[i]), float(times[i + 1]))
            )
    return values


def _interpolated(values: np.ndarray, grid: TimeGrid) -> Callable[[float], float]:
    """Piecewise-linear reading of grid values, for half steps of the one-step scheme"""

    def at(t: float) -> float:
        return float(np.interp(t, grid.times, values))
    return at


def riccati_solve(
        m: LQModel,
        grid: TimeGrid,
        xi_mean: float,
        problem: str = "mfg"
    ) -> RiccatiSolution:
    """Integrate η, η̄ and χ backward from stationary terminal data and x̄ forward from E[ξ]"""

    _check_problem(problem)
    m.validate(grid)

    roots = stationary_roots(m, grid.T, problem)
    r = m.r

    def d_eta(t, eta):
        v = _coefficients(m, t)
        return -(eta * (2 * v["b1"] - r) - eta * eta * v["b2"] ** 2 / v["p"] + v["q"] + v["q_bar"])

    def d_eta_bar(t, eta_bar):
        v = _coefficients(m, t)
        return -(eta_bar * _mean_feedback(v, problem) - eta_bar * eta_bar * v["b2"] ** 2 / v["p"] + v["q"])

    eta = _integrate_backward(d_eta, grid, roots.eta_star, "eta")
    eta_bar = _integrate_backward(d_eta_bar, grid, roots.eta_bar_star, "eta_bar")

    eta_bar_at = _interpolated(eta_bar, grid)

    def d_x_bar(t, x_bar):
        v = _coefficients(m, t)
        return (v["b1"] + v["b1_bar"] - eta_bar_at(t) * v["b2"] ** 2 / v["p"]) * x_bar

    x_bar = np.empty(grid.n_steps + 1)
    x_bar[0] = xi_mean
    for i in range(grid.n_steps):
        x_bar[i + 1] = _rk4(d_x_bar, grid.times[i], x_bar[i], grid.dt)

    eta_at, x_bar_at = _interpolated(eta, grid), _interpolated(x_bar, grid)

    def d_chi(t, chi):
        v = _coefficients(m, t)
        e, xb = eta_at(t), x_bar_at(t)
        linear = -e * v["b2"] ** 2 / v["p"] + v["b1"] - r
        forcing = -v["q_bar"] * xb + e * v["b1_bar"] * xb
        if problem == "mfc":
            linear += v["b1_bar"]
            forcing += e * v["b1_bar"] * xb
        return -(chi * linear + forcing)

    chi = _integrate_backward(d_chi, grid, 0.0, "chi")

    # root constraint η(t) >= (p/b2²)(b1 - r/2)
    values = m.on(grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        floor = values["p"] / values["b2"] ** 2 * (values["b1"] - r / 2)
    bad = eta < floor - 1e-9 * np.maximum(1.0, np.abs(floor))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise InfeasibilityError(f"eta({grid.times[i]:.4f}) = {eta[i]:.6g} violates the root constraint {floor[i]:.6g}")

    growth = float(grid.with_discount(r).weights @ (x_bar ** 2 + chi ** 2))
    if not math.isfinite(growth):
        raise DivergenceError("mean and offset violate the growth condition on the grid")

    logger.info(
        f"Riccati solve ({problem}): eta*={roots.eta_star:.6f}, eta_bar*={roots.eta_bar_star:.6f}, "
        f"eta(0)={eta[0]:.6f}"
    )

    return RiccatiSolution(
        grid=grid, eta=eta, chi=chi, eta_bar=eta_bar, x_bar=x_bar, problem=problem, root_rule=roots.rule
    )


def lq_closed_loop(
        m: LQModel,
        ric: RiccatiSolution,
        xi_spec: InitialCondition,
        driver: BrownianDriver
    ) -> ParticleEnsemble:
    """Particles driven by the feedback α = -(b2/p)(ηX + χ); y = ηX + χ and z = ησ"""

    grid = ric.grid
    if driver.n_steps != grid.n_steps or not math.isclose(driver.grid.dt, grid.dt):
        raise DimensionError(f"driver grid ({driver.n_steps} steps) does not match the Riccati grid ({grid.n_steps} steps)")

    values = m.on(grid)
    gain = values["b2"] ** 2 / values["p"]

    x = np.empty((driver.n_particles, grid.n_steps + 1))
    x[:, 0] = sample_initial(xi_spec, driver.n_particles, driver.seed)

    for i in range(grid.n_steps):
        xi = x[:, i]
        drift = values["b1"][i] * xi + values["b1_bar"][i] * xi.mean() - gain[i] * (ric.eta[i] * xi + ric.chi[i])
        x[:, i + 1] = xi + drift * grid.dt + m.sigma * driver.increments[:, i]

    y = ric.eta * x + ric.chi
    z = np.broadcast_to(ric.eta[:-1] * m.sigma, (driver.n_particles, grid.n_steps))

    return ParticleEnsemble(grid=grid, x=x, y=y, z=z)


def riccati_to_frame(ric: RiccatiSolution, m: Optional[LQModel] = None) -> pd.DataFrame:
    """Riccati paths on the grid; with the model, also the feedback gain b2²η/p and the η residual"""

    frame = ric.to_frame()
    if m is None:
        return frame

    values = m.on(ric.grid)
    frame["gain"] = values["b2"] ** 2 / values["p"] * ric.eta
    residual = np.full(ric.grid.n_steps + 1, np.nan)
    residual[1:-1] = riccati_residual(ric, m)
    frame["residual"] = residual
    return frame


def riccati_residual(ric: RiccatiSolution, m: LQModel) -> np.ndarray:
    """Centered-difference residual of the η equation at interior grid points"""

    grid = ric.grid
    values = m.on(grid)
    eta = ric.eta

    d_eta = (eta[2:] - eta[:-2]) / (2 * grid.dt)
    inner = slice(1, -1)
    return (
        d_eta
        + eta[inner] * (2 * values["b1"][inner] - m.r)
        - eta[inner] ** 2 * values["b2"][inner] ** 2 / values["p"][inner]
        + values["q"][inner] + values["q_bar"][inner]
    )


def lq_fixed_point_gap(ensemble: ParticleEnsemble, ric: RiccatiSolution, grid: TimeGrid) -> float:
    """Relative ‖Y - (ηX + χ)‖_K / ‖ηX + χ‖_K"""

    if ensemble.y is None:
        raise ValidationError("ensemble carries no y paths")
    if ensemble.x.shape[1] != ric.eta.shape[0]:
        raise DimensionError("ensemble and Riccati solution live on different grids")

    target = ric.eta * ensemble.x + ric.chi
    scale = weighted_l2_norm(target, grid)
    gap = weighted_l2_norm(ensemble.y - target, grid)

    return gap / scale if scale > 0 else gap
