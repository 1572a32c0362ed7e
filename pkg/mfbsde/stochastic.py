import math
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .types import TimeGrid, EmpiricalLaw, InitialCondition
from .errors import ValidationError, DimensionError, CapabilityError

logger = logging.getLogger("mfbsde")

_NOISE_STREAM_ = 0
_XI_STREAM_ = 0xFFFFFFFF
ASSIGNMENT_CAP = 512


def stream_generator(seed: int, *spawn_key: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, spawn_key)"""

    if seed < 0 or seed >= 2 ** 64:
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")

    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(spawn_key)))
    )


@dataclass(frozen=True, eq=False)
class BrownianDriver:
    seed: int
    grid: TimeGrid
    increments: np.ndarray

    @classmethod
    def generate(
            cls,
            seed: int,
            n_particles: int,
            grid: TimeGrid,
            stream: int = _NOISE_STREAM_
        ) -> "BrownianDriver":

        if n_particles < 1:
            raise ValidationError(f"n_particles must be >= 1, got {n_particles}")

        # one stream per particle: row j never depends on n_particles
        increments = np.empty((n_particles, grid.n_steps))
        for j in range(n_particles):
            increments[j] = stream_generator(seed, stream, j).standard_normal(grid.n_steps)

        increments *= math.sqrt(grid.dt)
        increments.setflags(write=False)

        return cls(seed=seed, grid=grid, increments=increments)

    @property
    def n_particles(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    def paths(self, sigma: float = 1.0) -> np.ndarray:
        """Cumulative σW on the grid, W_0 = 0"""

        w = np.zeros((self.n_particles, self.n_steps + 1))
        np.cumsum(sigma * self.increments, axis=1, out=w[:, 1:])
        return w


def weighted_l2_norm(v: np.ndarray, grid: TimeGrid) -> float:
    """Discounted norm sqrt((1/N) Σ_j ∫ e^{-Kt}|v_t|² dt) with the trapezoid rule"""

    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != grid.n_steps + 1:
        raise DimensionError(
            f"ensemble with shape {v.shape} does not live on a grid of {grid.n_steps + 1} points"
        )

    return float(np.sqrt(np.mean(np.square(v) @ grid.weights)))


def weighted_l2_distance(a: np.ndarray, b: np.ndarray, grid: TimeGrid) -> float:
    return weighted_l2_norm(np.asarray(a) - np.asarray(b), grid)


def _wasserstein2_1d(xa: np.ndarray, xb: np.ndarray) -> float:
    xa = np.sort(xa)
    xb = np.sort(xb)
    na, nb = xa.size, xb.size

    if na == nb:
        return float(np.sqrt(np.mean((xa - xb) ** 2)))

    # common refinement of the two quantile step functions
    levels = np.union1d(np.arange(1, na + 1) / na, np.arange(1, nb + 1) / nb)
    widths = np.diff(levels, prepend=0.0)
    mids = levels - 0.5 * widths

    ia = np.minimum((mids * na).astype(int), na - 1)
    ib = np.minimum((mids * nb).astype(int), nb - 1)

    return float(np.sqrt(np.sum(widths * (xa[ia] - xb[ib]) ** 2)))


def wasserstein2(
        a: EmpiricalLaw,
        b: EmpiricalLaw,
        assignment_cap: int = ASSIGNMENT_CAP
    ) -> float:

    if a.dim != b.dim:
        raise DimensionError(f"cannot compare a {a.dim}-d law with a {b.dim}-d law")

    if a.dim == 1:
        return _wasserstein2_1d(a.column(0), b.column(0))

    if a.size != b.size:
        raise CapabilityError(
            f"2-d Wasserstein distance needs equal cloud sizes, got {a.size} and {b.size}"
        )
    if a.size > assignment_cap:
        raise CapabilityError(
            f"2-d Wasserstein distance on {a.size} atoms exceeds the assignment cap {assignment_cap}; "
            f"subsample both clouds for diagnostics"
        )

    cost = cdist(a.points, b.points, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)

    return float(np.sqrt(cost[rows, cols].mean()))


def sample_initial(xi_spec: InitialCondition, n: int, seed: Optional[int] = 0) -> np.ndarray:
    if n < 1:
        raise ValidationError(f"number of samples must be >= 1, got {n}")

    if xi_spec.kind == "deterministic":
        return np.full(n, float(xi_spec.value))

    rng = stream_generator(seed, _XI_STREAM_)
    if xi_spec.kind == "gaussian":
        return xi_spec.mean + math.sqrt(xi_spec.variance) * rng.standard_normal(n)

    return xi_spec.lo + (xi_spec.hi - xi_spec.lo) * rng.random(n)
