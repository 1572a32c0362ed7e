import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union, Tuple

import numpy as np

from .types import TimeGrid, EmpiricalLaw, ConvexityParams
from .errors import ValidationError, CapabilityError

logger = logging.getLogger("mfbsde")

Scalar = Union[float, np.ndarray]
TimeFunction = Callable[[Scalar], Scalar]

# (t, x, y, m) -> value, vectorized over x and y
Coefficient = Callable[[float, Scalar, Scalar, EmpiricalLaw], Scalar]

_FUZZ_SEED_ = 20240601
_FUZZ_POINTS_ = 16
_FUZZ_CLOUD_ = 8
_PROBE_TIMES_ = np.linspace(0.0, 50.0, 501)


def evaluate_on(fn: TimeFunction, times: Scalar) -> Scalar:
    """Evaluate a time function, broadcasting constant returns to the shape of times"""

    values = np.asarray(fn(times), dtype=float)
    if np.ndim(times) == 0:
        return float(values)
    return np.broadcast_to(values, np.shape(times)).astype(float)


class PiecewiseConstant:
    """Right-continuous step function built from [[t0, v0], [t1, v1], ...] with t0 = 0"""

    def __init__(self, breakpoints: Sequence[Sequence[float]]):
        points = np.asarray(breakpoints, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
            raise ValidationError(
                f"breakpoints must be a non-empty list of [t, value] pairs, got {breakpoints!r}"
            )
        if not np.all(np.isfinite(points)):
            raise ValidationError("breakpoints must be finite")
        if points[0, 0] != 0.0:
            raise ValidationError(f"first breakpoint must start at t=0, got t={points[0, 0]}")
        if np.any(np.diff(points[:, 0]) <= 0):
            raise ValidationError("breakpoint times must be strictly increasing")

        self.times = points[:, 0]
        self.values = points[:, 1]

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls([[0.0, value]])

    def __call__(self, t: Scalar) -> Scalar:
        idx = np.searchsorted(self.times, t, side="right") - 1
        idx = np.clip(idx, 0, self.values.size - 1)
        values = self.values[idx]
        if np.ndim(t) == 0:
            return float(values)
        return values

    def to_list(self) -> list:
        return [[float(t), float(v)] for t, v in zip(self.times, self.values)]

    def __repr__(self) -> str:
        return f"PiecewiseConstant({self.to_list()})"


@dataclass(frozen=True)
class Assumption22:
    """Declared joint Lipschitz constant l, monotonicity κ and discount K"""

    l: float
    kappa: float
    K: float

    def __post_init__(self):
        if self.l < 0 or self.kappa <= 0:
            raise ValidationError(f"need l >= 0 and kappa > 0, got l={self.l}, kappa={self.kappa}")


@dataclass(frozen=True)
class Assumption25:
    kappa1: float
    kappa2: float
    l1: float
    l2: float
    eps1: float
    eps2: float
    K: float

    def __post_init__(self):
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValidationError(f"eps1, eps2 must be > 0, got {self.eps1}, {self.eps2}")
        if self.l1 < 0 or self.l2 < 0:
            raise ValidationError(f"l1, l2 must be >= 0, got {self.l1}, {self.l2}")


def _fuzz_cloud(rng: np.random.Generator, dim: int) -> EmpiricalLaw:
    return EmpiricalLaw(rng.normal(0.0, 2.0, size=(_FUZZ_CLOUD_, dim)))


@dataclass
class CoefficientSet:
    """The FBSDE pair (B, F) with constant diffusion σ and optional structural metadata"""

    drift: Coefficient
    driver: Coefficient
    sigma: float = 1.0
    assumption22: Optional[Assumption22] = None
    assumption25: Optional[Assumption25] = None
    name: str = "custom"

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        self._fuzz()

    def _fuzz(self):
        rng = np.random.default_rng(_FUZZ_SEED_)
        for _ in range(_FUZZ_POINTS_):
            t = float(rng.uniform(0.0, 10.0))
            x, y = rng.normal(0.0, 2.0, size=2)
            m = _fuzz_cloud(rng, 2)
            for label, fn in (("drift B", self.drift), ("driver F", self.driver)):
                try:
                    value = np.asarray(fn(t, x, y, m), dtype=float)
                except Exception as e:
                    raise ValidationError(
                        f"{label} of '{self.name}' failed at t={t:.3f}, x={x:.3f}, y={y:.3f}: {e}"
                    ) from e
                if not np.all(np.isfinite(value)):
                    raise ValidationError(
                        f"{label} of '{self.name}' is not finite at t={t:.3f}, x={x:.3f}, y={y:.3f}"
                    )

    def B(self, t: float, x: Scalar, y: Scalar, m: EmpiricalLaw) -> Scalar:
        return self.drift(t, x, y, m)

    def F(self, t: float, x: Scalar, y: Scalar, m: EmpiricalLaw) -> Scalar:
        return self.driver(t, x, y, m)


@dataclass(frozen=True)
class ActionSet:
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"action set needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lo) and math.isfinite(self.hi)

    def contains(self, a: Scalar) -> bool:
        a = np.asarray(a, dtype=float)
        return bool(np.all((a >= self.lo) & (a <= self.hi)))

    def clip(self, a: Scalar) -> Scalar:
        return np.clip(a, self.lo, self.hi)

    def anchor(self) -> float:
        """A point of A, the one closest to 0"""
        return float(np.clip(0.0, self.lo, self.hi))


@dataclass(frozen=True)
class LinearDrift:
    """b(t, x, μ, a) = b0(t) + b̄1(t)μ̄ + b1(t)x + b2(t)a"""

    b0: TimeFunction
    b1_bar: TimeFunction
    b1: TimeFunction
    b2: TimeFunction

    def __call__(self, t: float, x: Scalar, mu: EmpiricalLaw, a: Scalar) -> Scalar:
        return (
            evaluate_on(self.b0, t)
            + evaluate_on(self.b1_bar, t) * mu.mean[0]
            + evaluate_on(self.b1, t) * x
            + evaluate_on(self.b2, t) * a
        )


@dataclass
class ControlModel:
    """Control problem data: state drift b, running cost f with its partials, discount r and action set A.

    Callables take (t, x, mu, a) with mu the law of the state and are vectorized over x and a.
    d_mu_cost takes (t, x_prime, mu, a, x) and returns ∂_μ f(t, x', μ, a)(x).
    """

    drift: Callable
    cost: Callable
    d_x_cost: Callable
    d_a_cost: Callable
    r: float
    sigma: float = 1.0
    d_mu_cost: Optional[Callable] = None
    action_set: ActionSet = field(default_factory=ActionSet)
    convexity: Optional[ConvexityParams] = None
    linear_drift: Optional[LinearDrift] = None
    minimizer: Optional[Callable] = None
    dmu_f_depends_on_x: bool = True
    name: str = "custom"

    def __post_init__(self):
        if not (math.isfinite(self.r) and self.r > 0):
            raise ValidationError(f"discount r must be > 0, got {self.r}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        self._check_partials()

    def _fuzz_actions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.action_set.bounded:
            return rng.uniform(self.action_set.lo, self.action_set.hi, size=n)
        return self.action_set.clip(rng.normal(0.0, 2.0, size=n))

    def _check_partials(self):
        rng = np.random.default_rng(_FUZZ_SEED_)
        actions = self._fuzz_actions(rng, _FUZZ_POINTS_)

        for a in actions:
            t = float(rng.uniform(0.0, 10.0))
            x = float(rng.normal(0.0, 2.0))
            mu = _fuzz_cloud(rng, 1)

            h = 1e-5 * max(1.0, abs(a))
            lo, hi = self.action_set.clip(a - h), self.action_set.clip(a + h)
            fd = (self.cost(t, x, mu, hi) - self.cost(t, x, mu, lo)) / (hi - lo)
            exact = self.d_a_cost(t, x, mu, a)

            if not abs(fd - exact) <= 1e-5 * max(1.0, abs(exact)):
                raise ValidationError(
                    f"d_a_cost of '{self.name}' disagrees with the finite difference of cost at "
                    f"t={t:.3f}, x={x:.3f}, a={a:.3f}: {exact} vs {fd}"
                )

        if self.linear_drift is not None:
            for a in actions[:4]:
                t = float(rng.uniform(0.0, 10.0))
                x = float(rng.normal(0.0, 2.0))
                mu = _fuzz_cloud(rng, 1)
                declared = self.linear_drift(t, x, mu, a)
                if not abs(self.drift(t, x, mu, a) - declared) <= 1e-10 * max(1.0, abs(declared)):
                    raise ValidationError(f"drift of '{self.name}' does not match its declared linear form")

    def require_linear_drift(self) -> LinearDrift:
        if self.linear_drift is None:
            raise CapabilityError(
                f"model '{self.name}' does not declare a drift of the form b0 + b1_bar*mean + b1*x + b2*a"
            )
        return self.linear_drift


@dataclass
class LQModel:
    """Linear-quadratic model: b = b1 x + b1_bar μ̄ + b2 a, f = ½(q x² + q_bar (x - μ̄)² + p a²)"""

    b1: TimeFunction
    b1_bar: TimeFunction
    b2: TimeFunction
    q: TimeFunction
    q_bar: TimeFunction
    p: TimeFunction
    sigma: float = 1.0
    r: float = 0.5
    name: str = "lq"

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if not (math.isfinite(self.r) and self.r > 0):
            raise ValidationError(f"discount r must be > 0, got {self.r}")
        self.validate(_PROBE_TIMES_)

    @classmethod
    def constant(
            cls,
            b1: float = 0.0,
            b1_bar: float = 0.0,
            b2: float = 0.0,
            q: float = 0.0,
            q_bar: float = 0.0,
            p: float = 1.0,
            sigma: float = 1.0,
            r: float = 0.5,
            name: str = "lq"
        ) -> "LQModel":

        pc = PiecewiseConstant.constant
        return cls(
            b1=pc(b1), b1_bar=pc(b1_bar), b2=pc(b2), q=pc(q), q_bar=pc(q_bar), p=pc(p),
            sigma=sigma, r=r, name=name
        )

    def validate(self, times: Union[TimeGrid, np.ndarray]):
        if isinstance(times, TimeGrid):
            times = times.times

        for name in ("b1", "b1_bar", "b2", "q", "q_bar", "p"):
            values = evaluate_on(getattr(self, name), times)
            if not np.all(np.isfinite(values)):
                raise ValidationError(f"LQ coefficient {name} is unbounded on the grid")
            if name == "p" and np.any(values <= 0):
                t_bad = float(np.asarray(times)[np.argmax(values <= 0)])
                raise ValidationError(f"LQ coefficient p must be > 0, got p({t_bad}) <= 0")

    def at(self, t: float) -> dict:
        """Coefficient values frozen at time t"""
        return {
            name: evaluate_on(getattr(self, name), t)
            for name in ("b1", "b1_bar", "b2", "q", "q_bar", "p")
        }

    def on(self, grid: TimeGrid) -> dict:
        return {
            name: evaluate_on(getattr(self, name), grid.times)
            for name in ("b1", "b1_bar", "b2", "q", "q_bar", "p")
        }

    def has_mean_field(self, grid: TimeGrid) -> bool:
        values = self.on(grid)
        return bool(np.any(values["b1_bar"] != 0) or np.any(values["q_bar"] != 0))

    def to_dict(self) -> dict:
        record = dict(sigma=self.sigma, r=self.r)
        for name in ("b1", "b1_bar", "b2", "q", "q_bar", "p"):
            fn = getattr(self, name)
            record[name] = fn.to_list() if isinstance(fn, PiecewiseConstant) else repr(fn)
        return record


def lq_control_model(m: LQModel) -> ControlModel:
    def drift(t, x, mu, a):
        return (
            evaluate_on(m.b1, t) * x
            + evaluate_on(m.b1_bar, t) * mu.mean[0]
            + evaluate_on(m.b2, t) * a
        )

    def cost(t, x, mu, a):
        mean = mu.mean[0]
        return 0.5 * (
            evaluate_on(m.q, t) * np.square(x)
            + evaluate_on(m.q_bar, t) * np.square(x - mean)
            + evaluate_on(m.p, t) * np.square(a)
        )

    def d_x_cost(t, x, mu, a):
        return evaluate_on(m.q, t) * x + evaluate_on(m.q_bar, t) * (x - mu.mean[0])

    def d_a_cost(t, x, mu, a):
        return evaluate_on(m.p, t) * a

    def d_mu_cost(t, x_prime, mu, a, x=None):
        return -evaluate_on(m.q_bar, t) * (x_prime - mu.mean[0])

    def minimizer(t, x, mu, y):
        return -evaluate_on(m.b2, t) * np.asarray(y, dtype=float) / evaluate_on(m.p, t)

    zero = PiecewiseConstant.constant(0.0)

    return ControlModel(
        drift=drift,
        cost=cost,
        d_x_cost=d_x_cost,
        d_a_cost=d_a_cost,
        d_mu_cost=d_mu_cost,
        r=m.r,
        sigma=m.sigma,
        linear_drift=LinearDrift(b0=zero, b1_bar=m.b1_bar, b1=m.b1, b2=m.b2),
        minimizer=minimizer,
        dmu_f_depends_on_x=False,
        name=m.name
    )


def lq_fbsde_coefficients(
        m: LQModel,
        problem: str = "mfg",
        assumption22: Optional[Assumption22] = None
    ) -> CoefficientSet:

    if problem not in ("mfc", "mfg"):
        raise ValidationError(f"problem must be 'mfc' or 'mfg', got '{problem}'")

    def drift(t, x, y, law):
        b2 = evaluate_on(m.b2, t)
        return (
            evaluate_on(m.b1, t) * x
            - b2 * b2 / evaluate_on(m.p, t) * y
            + evaluate_on(m.b1_bar, t) * law.mean[0]
        )

    def driver(t, x, y, law):
        q_bar = evaluate_on(m.q_bar, t)
        value = (
            evaluate_on(m.b1, t) * y
            + (evaluate_on(m.q, t) + q_bar) * x
            - q_bar * law.mean[0]
            - m.r * y
        )
        if problem == "mfc":
            value = value + evaluate_on(m.b1_bar, t) * law.mean[1]
        return value

    return CoefficientSet(
        drift=drift,
        driver=driver,
        sigma=m.sigma,
        assumption22=assumption22,
        name=f"{m.name}-{problem}"
    )


def lq_assumption22_constants(m: LQModel, grid: TimeGrid) -> Assumption22:
    """Monotonicity constants of the LQ system without mean-field terms, with K = r"""

    values = m.on(grid)
    if m.has_mean_field(grid):
        raise ValidationError("monotonicity constants (K, kappa, l) are derived only for models with q_bar = b1_bar = 0")

    b1, b2, q, p = values["b1"], values["b2"], values["q"], values["p"]
    gain = b2 * b2 / p

    kappa = float(np.min(np.minimum(q, gain)))
    l = float(np.max(np.maximum(np.abs(b1) + q, gain + np.abs(b1 - m.r))))

    if kappa <= 0:
        raise ValidationError(f"LQ model is not monotone: min(q, b2^2/p) = {kappa} <= 0")

    return Assumption22(l=l, kappa=kappa, K=m.r)


def lq_benchmark(sigma: float = 1.0) -> LQModel:
    return LQModel.constant(
        b1=-1.0, b1_bar=0.0, b2=1.0, q=1.0, q_bar=0.0, p=1.0,
        sigma=sigma, r=0.5, name="lq-benchmark"
    )


def _synthetic_contraction() -> CoefficientSet:
    return CoefficientSet(
        drift=lambda t, x, y, m: -5.0 * x + 0.5 * y + 0.5 * m.mean[1],
        driver=lambda t, x, y, m: -5.0 * y + 0.5 * x + 0.5 * m.mean[0] + 1.0,
        sigma=1.0,
        assumption25=Assumption25(kappa1=5.0, kappa2=5.0, l1=1.0, l2=1.0, eps1=1.0, eps2=1.0, K=0.5),
        name="synthetic-contraction"
    )


def _decoupled_ou() -> CoefficientSet:
    return CoefficientSet(
        drift=lambda t, x, y, m: -x + 0.0 * y,
        driver=lambda t, x, y, m: -y + x,
        sigma=1.0,
        name="decoupled-ou"
    )


def _base_case(kappa: float = 1.0) -> CoefficientSet:
    return CoefficientSet(
        drift=lambda t, x, y, m: -kappa * y + 0.0 * x,
        driver=lambda t, x, y, m: kappa * x + 0.0 * y,
        sigma=1.0,
        assumption22=Assumption22(l=kappa, kappa=kappa, K=0.5),
        name="base-case"
    )


def _anti_monotone() -> CoefficientSet:
    return CoefficientSet(
        drift=lambda t, x, y, m: 5.0 * y + 0.0 * x,
        driver=lambda t, x, y, m: 5.0 * x + 0.0 * y,
        sigma=1.0,
        name="anti-monotone"
    )


_BUILTINS_ = {
    "synthetic-contraction": _synthetic_contraction,
    "decoupled-ou": _decoupled_ou,
    "base-case": _base_case,
    "anti-monotone": _anti_monotone,
}

BUILTIN_NAMES: Tuple[str, ...] = tuple(_BUILTINS_) + ("lq-benchmark",)


def builtin_model(name: str, problem: str = "mfg") -> CoefficientSet:
    """Named coefficient sets; 'lq-benchmark' is assembled from the LQ benchmark model"""

    if name == "lq-benchmark":
        m = lq_benchmark()
        return lq_fbsde_coefficients(m, problem, lq_assumption22_constants(m, TimeGrid(10.0, 0.01)))

    try:
        factory = _BUILTINS_[name]
    except KeyError:
        raise ValidationError(
            f"unknown builtin model '{name}', available: {', '.join(BUILTIN_NAMES)}"
        ) from None

    return factory()
