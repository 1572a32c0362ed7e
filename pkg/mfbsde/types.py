import math
from dataclasses import dataclass, field, asdict
from functools import cached_property
from typing import Optional, List, Dict, Any

import numpy as np
import pandas as pd

from .errors import ValidationError, DimensionError, DivergenceError


def _json_float(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on the truncated horizon [0, T] carrying the discount exponent K"""

    horizon: float
    dt: float
    discount_weight: float = 0.0
    n_steps: int = field(init=False)

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValidationError(f"horizon T must be > 0, got {self.horizon}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if not math.isfinite(self.discount_weight):
            raise ValidationError(f"discount weight K must be finite, got {self.discount_weight}")

        n_steps = round(self.horizon / self.dt)
        if n_steps < 1 or abs(n_steps * self.dt - self.horizon) > 1e-12 * self.horizon:
            raise ValidationError(
                f"dt={self.dt} does not split T={self.horizon} into a whole number of steps"
            )
        object.__setattr__(self, "n_steps", int(n_steps))

    @property
    def T(self) -> float:
        return self.horizon

    @property
    def K(self) -> float:
        return self.discount_weight

    @cached_property
    def times(self) -> np.ndarray:
        t = np.linspace(0.0, self.horizon, self.n_steps + 1)
        t.setflags(write=False)
        return t

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights of the discounted time integral, e^{-Kt_i}·dt halved at both ends"""

        w = np.full(self.n_steps + 1, self.dt)
        w[0] *= 0.5
        w[-1] *= 0.5
        w *= np.exp(-self.discount_weight * self.times)
        w.setflags(write=False)
        return w

    def with_discount(self, discount_weight: float) -> "TimeGrid":
        return TimeGrid(self.horizon, self.dt, discount_weight)


@dataclass(frozen=True, eq=False)
class EmpiricalLaw:
    """Equal-weight atom cloud in dimension 1 or 2"""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] not in (1, 2):
            raise DimensionError(
                f"empirical law needs an (N, d) array with N >= 1 and d in (1, 2), got shape {pts.shape}"
            )
        if not np.all(np.isfinite(pts)):
            raise ValidationError("empirical law has non-finite atoms")

        pts = pts.view()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_columns(cls, *columns: np.ndarray) -> "EmpiricalLaw":
        return cls(np.column_stack([np.asarray(c, dtype=float) for c in columns]))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @cached_property
    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @cached_property
    def second_moment(self) -> np.ndarray:
        return np.mean(self.points ** 2, axis=0)

    @cached_property
    def covariance(self) -> np.ndarray:
        centered = self.points - self.mean
        return centered.T @ centered / self.size

    def marginal(self, k: int) -> "EmpiricalLaw":
        if not 0 <= k < self.dim:
            raise DimensionError(f"marginal {k} of a {self.dim}-dimensional law")
        return EmpiricalLaw(self.points[:, k])

    def column(self, k: int) -> np.ndarray:
        return self.points[:, k]


@dataclass(frozen=True)
class InitialCondition:
    """Law of the initial state ξ"""

    kind: str = "deterministic"
    value: float = 0.0
    mean: float = 0.0
    variance: float = 1.0
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("deterministic", "gaussian", "uniform"):
            raise ValidationError(f"unknown initial condition kind '{self.kind}'")
        for name in ("value", "mean", "variance", "lo", "hi"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"initial condition {name} must be finite")
        if self.kind == "gaussian" and self.variance < 0:
            raise ValidationError(f"gaussian variance must be >= 0, got {self.variance}")
        if self.kind == "uniform" and self.lo > self.hi:
            raise ValidationError(f"uniform bounds need lo <= hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def deterministic(cls, value: float) -> "InitialCondition":
        return cls(kind="deterministic", value=value)

    @classmethod
    def gaussian(cls, mean: float, variance: float) -> "InitialCondition":
        return cls(kind="gaussian", mean=mean, variance=variance)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "InitialCondition":
        return cls(kind="uniform", lo=lo, hi=hi)

    @property
    def expectation(self) -> float:
        if self.kind == "deterministic":
            return self.value
        if self.kind == "gaussian":
            return self.mean
        return 0.5 * (self.lo + self.hi)

    def to_dict(self) -> dict:
        if self.kind == "deterministic":
            return dict(kind=self.kind, value=self.value)
        if self.kind == "gaussian":
            return dict(kind=self.kind, mean=self.mean, variance=self.variance)
        return dict(kind=self.kind, lo=self.lo, hi=self.hi)


@dataclass
class ParticleEnsemble:
    """N simulated paths of (X, Y, Z); z lives on the n_steps left endpoints"""

    grid: TimeGrid
    x: np.ndarray
    y: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        n_cols = self.grid.n_steps + 1
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[1] != n_cols:
            raise DimensionError(f"x must have shape (N, {n_cols}), got {self.x.shape}")

        shapes = dict(y=(self.x.shape[0], n_cols), z=(self.x.shape[0], n_cols - 1))
        for name, shape in shapes.items():
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=float)
            if value.shape != shape:
                raise DimensionError(f"{name} must have shape {shape}, got {value.shape}")
            setattr(self, name, value)

        for name in ("x", "y", "z"):
            value = getattr(self, name)
            if value is None:
                continue
            bad = ~np.isfinite(value)
            if bad.any():
                step = int(np.argmax(bad.any(axis=0)))
                raise DivergenceError(f"non-finite {name} in particle ensemble", step=step)

    @property
    def n_particles(self) -> int:
        return self.x.shape[0]

    def law(self, i: int) -> EmpiricalLaw:
        """Joint law of (x, y) at grid index i"""

        if self.y is None:
            return EmpiricalLaw(self.x[:, i])
        return EmpiricalLaw.from_columns(self.x[:, i], self.y[:, i])

    def to_frame(self) -> pd.DataFrame:
        frame = dict(
            t=self.grid.times,
            mean_x=self.x.mean(axis=0),
            var_x=self.x.var(axis=0)
        )
        if self.y is not None:
            frame["mean_y"] = self.y.mean(axis=0)
            frame["var_y"] = self.y.var(axis=0)
        if self.z is not None:
            frame["mean_z"] = np.append(self.z.mean(axis=0), np.nan)

        return pd.DataFrame(frame)


@dataclass
class IterationRecord:
    iter: int
    delta_norm: float
    y_delta_norm: float
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        record = dict(
            iter=self.iter,
            delta_norm=_json_float(self.delta_norm),
            y_delta_norm=_json_float(self.y_delta_norm)
        )
        if include_timing:
            record["wall_time"] = self.wall_time
        return record


@dataclass
class SolveReport:
    method: str
    iterates: List[IterationRecord]
    converged: bool
    contraction_ratio_estimate: Optional[float]
    final: Optional[ParticleEnsemble]
    truncation_T: float
    dt: float
    n_particles: int
    discount_weight: float
    warnings: List[str] = field(default_factory=list)
    inner_law_delta: Optional[float] = None
    delta_step: Optional[float] = None
    levels: Optional[int] = None
    inner_solves: Optional[int] = None

    @property
    def last_delta(self) -> float:
        return self.iterates[-1].delta_norm if self.iterates else math.inf

    def to_dict(self, include_timing: bool = False) -> dict:
        report = dict(
            method=self.method,
            converged=self.converged,
            contraction_ratio_estimate=_json_float(self.contraction_ratio_estimate),
            truncation_T=self.truncation_T,
            dt=self.dt,
            n_particles=self.n_particles,
            discount_weight=self.discount_weight,
            inner_law_delta=_json_float(self.inner_law_delta),
            iterates=[it.to_dict(include_timing) for it in self.iterates],
            warnings=list(self.warnings)
        )
        if self.delta_step is not None:
            report["delta_step"] = self.delta_step
            report["levels"] = self.levels
            report["inner_solves"] = self.inner_solves
        return report


@dataclass
class UniquenessReport:
    max_distance: float
    distances: List[float]
    converged_all: bool
    starts: List[str]
    reports: List[SolveReport] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return dict(
            max_distance=_json_float(self.max_distance),
            distances=[_json_float(d) for d in self.distances],
            converged_all=self.converged_all,
            starts=list(self.starts)
        )


@dataclass(frozen=True, eq=False)
class ContinuationState:
    """One level of the λ-family: offsets φ, ψ already folded with the frozen arguments"""

    lam: float
    delta_step: float
    phi: np.ndarray
    psi: np.ndarray
    kappa: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.delta_step <= 0:
            raise ValidationError(f"continuation step must be > 0, got {self.delta_step}")
        if self.kappa <= 0:
            raise ValidationError(f"kappa must be > 0, got {self.kappa}")
        if np.shape(self.phi) != np.shape(self.psi):
            raise DimensionError("phi and psi must share one shape")


@dataclass(frozen=True, eq=False)
class HamiltonianEval:
    t: float
    x: float
    y: float
    mu: EmpiricalLaw
    a: float
    value: float


@dataclass
class ConditionReport:
    condition_id: str
    holds: bool
    margin: float
    method: str
    samples_used: int = 0
    std_error: Optional[float] = None
    contraction_constant: Optional[float] = None

    def __post_init__(self):
        if self.method not in ("arithmetic", "monte-carlo"):
            raise ValidationError(f"unknown check method '{self.method}'")

    def to_dict(self) -> dict:
        report = dict(
            condition_id=self.condition_id,
            holds=bool(self.holds),
            margin=_json_float(self.margin),
            method=self.method,
            samples_used=int(self.samples_used)
        )
        if self.std_error is not None:
            report["std_error"] = _json_float(self.std_error)
        if self.contraction_constant is not None:
            report["contraction_constant"] = _json_float(self.contraction_constant)
        return report


@dataclass(frozen=True)
class ConvexityParams:
    eta: float
    iota: float
    zeta: float
    l: float
    quadratic_growth_declared: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError(f"eta must be > 0, got {self.eta}")
        if not self.iota >= 0:
            raise ValidationError(f"iota must be >= 0, got {self.iota}")
        if not self.zeta > 0:
            raise ValidationError(f"zeta must be > 0, got {self.zeta}")
        if not self.l >= 0:
            raise ValidationError(f"l must be >= 0, got {self.l}")
        if 2 * self.eta > self.zeta * (1 + 1e-12):
            raise ValidationError(f"convexity needs 2*eta <= zeta, got eta={self.eta}, zeta={self.zeta}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostEstimate:
    J: float
    std_error: float
    per_particle: np.ndarray = field(repr=False, default=None)


@dataclass
class ProbeResult:
    worst_delta: float
    std_error: float
    deltas: List[float]
    std_errors: List[float]
    base_cost: float

    def to_dict(self) -> dict:
        return dict(
            worst_delta=_json_float(self.worst_delta),
            std_error=_json_float(self.std_error),
            deltas=[_json_float(d) for d in self.deltas],
            std_errors=[_json_float(s) for s in self.std_errors],
            base_cost=_json_float(self.base_cost)
        )


@dataclass(frozen=True)
class StationaryRoots:
    eta_star: float
    eta_bar_star: float
    rule: str = "admissible"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RiccatiSolution:
    grid: TimeGrid
    eta: np.ndarray
    chi: np.ndarray
    eta_bar: np.ndarray
    x_bar: np.ndarray
    problem: str = "mfg"
    root_rule: str = "admissible"

    def __post_init__(self):
        n_cols = self.grid.n_steps + 1
        for name in ("eta", "chi", "eta_bar", "x_bar"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != (n_cols,):
                raise DimensionError(f"{name} must have {n_cols} grid values, got shape {value.shape}")
            setattr(self, name, value)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(dict(
            t=self.grid.times,
            eta=self.eta,
            chi=self.chi,
            eta_bar=self.eta_bar,
            x_bar=self.x_bar
        ))
