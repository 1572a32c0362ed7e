import math
import logging
from dataclasses import dataclass, asdict
from typing import Optional, List, Tuple, Union

import numpy as np

from .types import (
    TimeGrid, EmpiricalLaw, InitialCondition, ParticleEnsemble,
    IterationRecord, SolveReport, UniquenessReport, ContinuationState
)
from .errors import (
    ValidationError, DimensionError, DivergenceError,
    HypothesisViolationError, BudgetError
)
from .stochastic import BrownianDriver, weighted_l2_norm, sample_initial
from .coefficients import CoefficientSet
from .regression import basis_degree, regress_now, regress_later
from .utils.timer import Timer

logger = logging.getLogger("mfbsde")

Offset = Union[float, np.ndarray]

_DIVERGENCE_FACTOR_ = 10.0
_DIVERGENCE_STREAK_ = 3
_RATIO_WINDOW_ = 5


@dataclass(frozen=True)
class SolverConfig:
    grid: TimeGrid
    n_particles: int = 1000
    picard_tol: float = 1e-4
    max_picard_iters: int = 50
    inner_law_iters: int = 3
    regression_basis: str = "affine"
    degree: int = 1
    damping: float = 0.0
    conditional_expectation: str = "regress_now"
    max_inner_solves: int = 10_000
    continuation_forcing: float = 1.0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValidationError(f"n_particles must be >= 1, got {self.n_particles}")
        if not (math.isfinite(self.picard_tol) and self.picard_tol > 0):
            raise ValidationError(f"picard_tol must be > 0, got {self.picard_tol}")
        if self.max_picard_iters < 1:
            raise ValidationError(f"max_picard_iters must be >= 1, got {self.max_picard_iters}")
        if self.inner_law_iters < 1:
            raise ValidationError(f"inner_law_iters must be >= 1, got {self.inner_law_iters}")
        if not 0.0 <= self.damping <= 1.0:
            raise ValidationError(f"damping must lie in [0, 1], got {self.damping}")
        if self.conditional_expectation not in ("regress_now", "regress_later"):
            raise ValidationError(
                f"conditional_expectation must be 'regress_now' or 'regress_later', "
                f"got '{self.conditional_expectation}'"
            )
        if self.max_inner_solves < 1:
            raise ValidationError(f"max_inner_solves must be >= 1, got {self.max_inner_solves}")
        if not self.continuation_forcing > 0:
            raise ValidationError(f"continuation_forcing must be > 0, got {self.continuation_forcing}")
        basis_degree(self.regression_basis, self.degree)

    @property
    def basis_degree(self) -> int:
        return basis_degree(self.regression_basis, self.degree)

    def to_dict(self) -> dict:
        record = asdict(self)
        record["grid"] = dict(T=self.grid.T, dt=self.grid.dt, K=self.grid.K)
        return record


def contraction_ratio(deltas: List[float]) -> Optional[float]:
    """Geometric mean of successive delta ratios over the last min(5, k-1) iterations"""

    if len(deltas) < 2:
        return None

    window = deltas[-(min(_RATIO_WINDOW_, len(deltas) - 1) + 1):]
    if any(d == 0 for d in window):
        return 0.0

    ratios = np.asarray(window[1:]) / np.asarray(window[:-1])
    return float(np.exp(np.mean(np.log(ratios))))


def _combined_distance(a: ParticleEnsemble, b: ParticleEnsemble, grid: TimeGrid) -> Tuple[float, float, float]:
    dx = weighted_l2_norm(a.x - b.x, grid)
    dy = weighted_l2_norm(a.y - b.y, grid)
    return math.hypot(dx, dy), dx, dy


class FBSDESolver:
    """Particle solver for the discounted McKean-Vlasov FBSDE on a truncated horizon.

    The solver owns one Brownian driver and one draw of the initial condition, so every
    solve it runs uses common random numbers.
    """

    def __init__(
            self,
            cfg: SolverConfig,
            driver: BrownianDriver,
            xi_spec: InitialCondition
        ):

        if driver.increments.shape != (cfg.n_particles, cfg.grid.n_steps):
            raise DimensionError(
                f"driver increments have shape {driver.increments.shape}, "
                f"expected ({cfg.n_particles}, {cfg.grid.n_steps})"
            )

        self.cfg = cfg
        self.grid = cfg.grid
        self.driver = driver
        self.xi_spec = xi_spec
        self.xi = sample_initial(xi_spec, cfg.n_particles, driver.seed)
        self.dw = driver.increments

        self._warnings: List[str] = []
        self._inner_law_delta = 0.0
        self._inner_solves = 0

    def _reset(self):
        self._warnings = []
        self._inner_law_delta = 0.0
        self._inner_solves = 0

    def _warn(self, message: str):
        if message not in self._warnings:
            self._warnings.append(message)
            logger.warning(message)

    def _as_paths(self, v: Offset, name: str) -> np.ndarray:
        shape = (self.cfg.n_particles, self.grid.n_steps + 1)
        v = np.asarray(v, dtype=float)
        try:
            return np.broadcast_to(v, shape)
        except ValueError:
            raise DimensionError(f"{name} with shape {v.shape} does not match ensemble shape {shape}") from None

    def _conditional_expectation(
            self,
            i: int,
            features: np.ndarray,
            target: np.ndarray,
            sigma: float
        ) -> Tuple[np.ndarray, np.ndarray]:
        """Ê[target_{i+1} | F_i] and the martingale integrand at slice i"""

        dt = self.grid.dt
        if self.cfg.conditional_expectation == "regress_later":
            cont, z, deficient = regress_later(
                features[:, i + 1], target, self.dw[:, i], sigma, dt, self.cfg.basis_degree
            )
        else:
            cont, z, deficient = regress_now(
                features[:, i], target, self.dw[:, i], dt, self.cfg.basis_degree
            )

        if deficient:
            self._warn(
                f"rank-deficient regression design at t={self.grid.times[i]:.4g}, "
                f"falling back to ensemble-mean regression"
            )
        return cont, z

    def solve_mkv_sde(self, coeffs: CoefficientSet, y_bar: np.ndarray) -> ParticleEnsemble:
        """Euler-Maruyama sweep of dX = B(t, X, ȳ, L(X, ȳ))dt + σdW from the sampled ξ"""

        y_bar = self._as_paths(y_bar, "y_bar")
        n, dt = self.grid.n_steps, self.grid.dt

        x = np.empty((self.cfg.n_particles, n + 1))
        x[:, 0] = self.xi

        for i in range(n):
            m = EmpiricalLaw.from_columns(x[:, i], y_bar[:, i])
            drift = coeffs.B(self.grid.times[i], x[:, i], y_bar[:, i], m)
            x[:, i + 1] = x[:, i] + drift * dt + coeffs.sigma * self.dw[:, i]

            if not np.all(np.isfinite(x[:, i + 1])):
                raise DivergenceError("forward state is not finite", step=i + 1)

        return ParticleEnsemble(self.grid, x)

    def solve_bsde(self, coeffs: CoefficientSet, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Backward regression sweep from y_T = 0 with the law frozen slice by slice"""

        x = self._as_paths(x, "x")
        n, dt = self.grid.n_steps, self.grid.dt

        y = np.zeros((self.cfg.n_particles, n + 1))
        z = np.zeros((self.cfg.n_particles, n))

        for i in range(n - 1, -1, -1):
            t = self.grid.times[i]
            cont, z[:, i] = self._conditional_expectation(i, x, y[:, i + 1], coeffs.sigma)

            # Refreezes L(x_i, y_i) inner_law_iters times on this slice. Slices below i only read
            # y[:, i], so this has the same fixed point as repeating the whole backward pass.
            y_i = cont
            change = 0.0
            for _ in range(self.cfg.inner_law_iters):
                m = EmpiricalLaw.from_columns(x[:, i], y_i)
                y_next = cont + coeffs.F(t, x[:, i], y_i, m) * dt
                if not np.all(np.isfinite(y_next)):
                    raise DivergenceError("backward state is not finite", step=i)
                change = float(np.sqrt(np.mean((y_next - y_i) ** 2)))
                y_i = y_next

            y[:, i] = y_i
            self._inner_law_delta = max(self._inner_law_delta, change)

        return y, z

    def solve_lambda0(
            self,
            kappa: float,
            phi: Offset = 0.0,
            psi: Offset = 0.0,
            state: Optional[np.ndarray] = None,
            sigma: float = 1.0
        ) -> ParticleEnsemble:
        """Base case dX = (-κY + φ)dt + σdW, dY = -(κX + ψ)dt + ZdW.

        Solves the auxiliary BSDE dP = (κP - φ - ψ)dt + (Q - σ)dW backward with an implicit
        step, then dX = (-κX - κP + φ)dt + σdW forward, and returns (X, X + P, Q).
        Regression features come from ``state``, or from ξ + σW when it is omitted.
        """

        if not kappa > 0:
            raise ValidationError(f"kappa must be > 0, got {kappa}")
        if self.grid.K >= 2 * kappa or self.grid.K < 0:
            raise HypothesisViolationError(
                f"the base case needs 0 <= K < 2*kappa, got K={self.grid.K}, kappa={kappa}"
            )

        self._inner_solves += 1
        if self._inner_solves > self.cfg.max_inner_solves:
            raise BudgetError(f"continuation exceeded {self.cfg.max_inner_solves} base-case solves")

        phi = self._as_paths(phi, "phi")
        psi = self._as_paths(psi, "psi")
        if state is None:
            state = self.xi[:, None] + self.driver.paths(sigma)

        n, dt = self.grid.n_steps, self.grid.dt
        p = np.zeros((self.cfg.n_particles, n + 1))
        q = np.empty((self.cfg.n_particles, n))

        for i in range(n - 1, -1, -1):
            cont, zp = self._conditional_expectation(i, state, p[:, i + 1], sigma)
            p[:, i] = (cont + (phi[:, i] + psi[:, i]) * dt) / (1 + kappa * dt)
            q[:, i] = zp + sigma

        x = np.empty_like(p)
        x[:, 0] = self.xi
        for i in range(n):
            drift = -kappa * x[:, i] - kappa * p[:, i] + phi[:, i]
            x[:, i + 1] = x[:, i] + drift * dt + sigma * self.dw[:, i]

        return ParticleEnsemble(self.grid, x, x + p, q)

    def _picard_step(self, coeffs: CoefficientSet, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        y, z = self.solve_bsde(coeffs, x)
        x_new = self.solve_mkv_sde(coeffs, y).x
        if self.cfg.damping > 0:
            x_new = (1 - self.cfg.damping) * x_new + self.cfg.damping * x
        return x_new, y, z

    def _report(
            self,
            method: str,
            records: List[IterationRecord],
            converged: bool,
            final: Optional[ParticleEnsemble],
            **extra
        ) -> SolveReport:

        return SolveReport(
            method=method,
            iterates=records,
            converged=converged,
            contraction_ratio_estimate=contraction_ratio([r.delta_norm for r in records]),
            final=final,
            truncation_T=self.grid.T,
            dt=self.grid.dt,
            n_particles=self.cfg.n_particles,
            discount_weight=self.grid.K,
            warnings=list(self._warnings),
            inner_law_delta=self._inner_law_delta,
            **extra
        )

    def picard_solve(self, coeffs: CoefficientSet, x0: Optional[np.ndarray] = None) -> SolveReport:
        """Fixed-point iteration x -> Φ(Ψ(x)) of backward and forward sweeps under common noise"""

        self._reset()
        cfg, grid = self.cfg, self.grid

        x = np.repeat(self.xi[:, None], grid.n_steps + 1, axis=1) if x0 is None else self._as_paths(x0, "x0").copy()
        y_prev = None
        records: List[IterationRecord] = []
        reference = None
        streak = 0
        converged = False

        logger.info(
            f"Picard solve of '{coeffs.name}': N={cfg.n_particles}, T={grid.T}, dt={grid.dt}, K={grid.K}"
        )

        for k in range(1, cfg.max_picard_iters + 1):
            timer = Timer(start=True)
            try:
                x_new, y, _ = self._picard_step(coeffs, x)
            except DivergenceError as e:
                e.report = self._report("picard", records, False, None)
                raise

            delta = weighted_l2_norm(x_new - x, grid)
            y_delta = math.nan if y_prev is None else weighted_l2_norm(y - y_prev, grid)
            timer.stop()

            records.append(IterationRecord(k, delta, y_delta, timer.seconds_elapsed()))
            logger.info(f"Picard iteration {k}: delta={delta:.3e}, y_delta={y_delta:.3e}, {timer.seconds_elapsed()}s")

            x, y_prev = x_new, y

            if not math.isfinite(delta):
                raise DivergenceError(
                    "Picard delta norm is not finite", step=k,
                    report=self._report("picard", records, False, None)
                )

            if reference is None:
                reference = delta
            streak = streak + 1 if delta > _DIVERGENCE_FACTOR_ * reference else 0
            if streak >= _DIVERGENCE_STREAK_:
                raise DivergenceError(
                    f"Picard delta grew above {_DIVERGENCE_FACTOR_:g}x the first delta "
                    f"for {_DIVERGENCE_STREAK_} iterations", step=k,
                    report=self._report("picard", records, False, None)
                )

            if delta <= cfg.picard_tol:
                converged = True
                break

        y, z = self.solve_bsde(coeffs, x)
        final = ParticleEnsemble(grid, x, y, z)

        if not converged:
            logger.warning(
                f"Picard solve did not converge in {cfg.max_picard_iters} iterations "
                f"(last delta {records[-1].delta_norm:.3e} > {cfg.picard_tol:g})"
            )

        return self._report("picard", records, converged, final)

    def _frozen_offsets(
            self,
            coeffs: CoefficientSet,
            u: ParticleEnsemble,
            step: float,
            kappa: float
        ) -> Tuple[np.ndarray, np.ndarray]:
        """δ(B(u) + κy) and δ(F(u) - κx), slice by slice with m = L(x_t, y_t)"""

        d_phi = np.empty_like(u.x)
        d_psi = np.empty_like(u.x)
        for i, t in enumerate(self.grid.times):
            m = u.law(i)
            d_phi[:, i] = coeffs.B(t, u.x[:, i], u.y[:, i], m) + kappa * u.y[:, i]
            d_psi[:, i] = coeffs.F(t, u.x[:, i], u.y[:, i], m) - kappa * u.x[:, i]

        return step * d_phi, step * d_psi

    def _solve_level(
            self,
            level: int,
            lambdas: List[float],
            coeffs: CoefficientSet,
            state: ContinuationState,
            tol: float,
            warm: ParticleEnsemble,
            cache: List[Optional[ParticleEnsemble]],
            records: Optional[List[IterationRecord]] = None
        ) -> Tuple[ParticleEnsemble, bool]:

        if level == 0:
            return self.solve_lambda0(state.kappa, state.phi, state.psi, state=warm.x, sigma=coeffs.sigma), True

        step = lambdas[level] - lambdas[level - 1]
        u = warm
        last = None
        converged = False

        for k in range(1, self.cfg.max_picard_iters + 1):
            timer = Timer(start=True)
            d_phi, d_psi = self._frozen_offsets(coeffs, u, step, state.kappa)
            child = ContinuationState(
                lam=lambdas[level - 1], delta_step=state.delta_step,
                phi=state.phi + d_phi, psi=state.psi + d_psi, kappa=state.kappa
            )

            child_tol = math.inf if last is None else max(0.1 * tol, self.cfg.continuation_forcing * last)
            child_warm = cache[level - 1] if cache[level - 1] is not None else u

            new, _ = self._solve_level(level - 1, lambdas, coeffs, child, child_tol, child_warm, cache)
            cache[level - 1] = new

            dist, dx, dy = _combined_distance(new, u, self.grid)
            timer.stop()
            u, last = new, dist

            if not math.isfinite(dist):
                raise DivergenceError(f"continuation level {level} produced a non-finite iterate", step=k)

            logger.debug(f"Continuation level {level} (lambda={lambdas[level]:.4f}) iteration {k}: distance={dist:.3e}")
            if records is not None:
                records.append(IterationRecord(k, dx, dy, timer.seconds_elapsed()))
                logger.info(
                    f"Continuation iteration {k}: distance={dist:.3e}, "
                    f"base-case solves so far {self._inner_solves}"
                )

            if dist <= tol:
                converged = True
                break

        return u, converged

    def continuation_solve(self, coeffs: CoefficientSet, kappa: float, l: float) -> SolveReport:
        """Continuation in λ from the base case to the target system in steps δ = 2κ/(3κ+12l)"""

        self._reset()
        cfg, grid = self.cfg, self.grid

        if not kappa > 0 or not l >= 0:
            raise ValidationError(f"continuation needs kappa > 0 and l >= 0, got kappa={kappa}, l={l}")
        if not 0 < grid.K < 2 * kappa:
            raise HypothesisViolationError(
                f"continuation needs 0 < K < 2*kappa, got K={grid.K}, kappa={kappa}"
            )

        step = 2 * kappa / (3 * kappa + 12 * l)
        n_levels = continuation_levels(kappa, l)
        lambdas = [min(k * step, 1.0) for k in range(n_levels + 1)]

        logger.info(
            f"Continuation solve of '{coeffs.name}': delta={step:.5f}, {n_levels} levels, "
            f"N={cfg.n_particles}, T={grid.T}, dt={grid.dt}, K={grid.K}"
        )

        records: List[IterationRecord] = []
        extra = dict(delta_step=step, levels=n_levels)

        try:
            warm = self.solve_lambda0(kappa, sigma=coeffs.sigma)
            cache: List[Optional[ParticleEnsemble]] = [None] * (n_levels + 1)
            top = ContinuationState(
                lam=lambdas[-1], delta_step=step, phi=np.zeros_like(warm.x), psi=np.zeros_like(warm.x), kappa=kappa
            )
            final, converged = self._solve_level(n_levels, lambdas, coeffs, top, cfg.picard_tol, warm, cache, records)
        except (BudgetError, DivergenceError) as e:
            e.report = self._report("continuation", records, False, None, inner_solves=self._inner_solves, **extra)
            raise

        final = ParticleEnsemble(grid, final.x, final.y, final.z)
        if not converged:
            logger.warning(f"Continuation did not converge in {cfg.max_picard_iters} outer iterations")

        return self._report(
            "continuation", records, converged, final, inner_solves=self._inner_solves, **extra
        )

    def _start_paths(self, name: str, sigma: float) -> np.ndarray:
        n, dt = self.grid.n_steps, self.grid.dt
        if name == "constant":
            return np.repeat(self.xi[:, None], n + 1, axis=1)

        if name == "ou-presolve":
            x = np.empty((self.cfg.n_particles, n + 1))
            x[:, 0] = self.xi
            for i in range(n):
                x[:, i + 1] = x[:, i] - x[:, i] * dt + sigma * self.dw[:, i]
            return x

        scale = 1.0 if name == "random-walk" else float(name.rsplit("-", 1)[1])
        return self.xi[:, None] + scale * self.driver.paths(sigma)

    def uniqueness_probe(self, coeffs: CoefficientSet, n_starts: int = 3) -> UniquenessReport:
        """Picard solves from distinct initial iterates under common noise; reports pairwise distances"""

        if n_starts < 2:
            raise ValidationError(f"uniqueness probe needs n_starts >= 2, got {n_starts}")

        starts = ["constant", "ou-presolve", "random-walk"][:n_starts]
        starts += [f"random-walk-{1 + k / 2:g}" for k in range(1, n_starts - len(starts) + 1)]

        reports = []
        for name in starts:
            logger.info(f"Uniqueness probe: start '{name}'")
            reports.append(self.picard_solve(coeffs, x0=self._start_paths(name, coeffs.sigma)))

        distances = []
        for a in range(len(reports)):
            for b in range(a + 1, len(reports)):
                dist, _, _ = _combined_distance(reports[a].final, reports[b].final, self.grid)
                distances.append(dist)

        converged_all = all(r.converged for r in reports)
        if not converged_all:
            failed = [s for s, r in zip(starts, reports) if not r.converged]
            logger.warning(f"Uniqueness probe is partial: starts {failed} did not converge")

        return UniquenessReport(
            max_distance=max(distances),
            distances=distances,
            converged_all=converged_all,
            starts=starts,
            reports=reports
        )


def continuation_levels(kappa: float, l: float) -> int:
    step = 2 * kappa / (3 * kappa + 12 * l)
    return int(math.ceil(1.0 / step - 1e-12))


def solve_mkv_sde(
        coeffs: CoefficientSet,
        y_bar: np.ndarray,
        xi_spec: InitialCondition,
        cfg: SolverConfig,
        driver: BrownianDriver
    ) -> ParticleEnsemble:
    return FBSDESolver(cfg, driver, xi_spec).solve_mkv_sde(coeffs, y_bar)


def solve_bsde(
        coeffs: CoefficientSet,
        x: np.ndarray,
        cfg: SolverConfig,
        driver: BrownianDriver,
        xi_spec: Optional[InitialCondition] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
    xi_spec = xi_spec or InitialCondition()
    return FBSDESolver(cfg, driver, xi_spec).solve_bsde(coeffs, x)


def solve_lambda0(
        kappa: float,
        phi: Offset,
        psi: Offset,
        xi_spec: InitialCondition,
        cfg: SolverConfig,
        driver: BrownianDriver,
        sigma: float = 1.0
    ) -> ParticleEnsemble:
    return FBSDESolver(cfg, driver, xi_spec).solve_lambda0(kappa, phi, psi, sigma=sigma)


def picard_solve(
        coeffs: CoefficientSet,
        xi_spec: InitialCondition,
        cfg: SolverConfig,
        driver: BrownianDriver
    ) -> SolveReport:
    return FBSDESolver(cfg, driver, xi_spec).picard_solve(coeffs)


def continuation_solve(
        coeffs: CoefficientSet,
        xi_spec: InitialCondition,
        cfg: SolverConfig,
        driver: BrownianDriver,
        kappa: float,
        l: float
    ) -> SolveReport:
    return FBSDESolver(cfg, driver, xi_spec).continuation_solve(coeffs, kappa, l)


def uniqueness_probe(
        coeffs: CoefficientSet,
        xi_spec: InitialCondition,
        cfg: SolverConfig,
        driver: BrownianDriver,
        n_starts: int = 3
    ) -> UniquenessReport:
    return FBSDESolver(cfg, driver, xi_spec).uniqueness_probe(coeffs, n_starts)
