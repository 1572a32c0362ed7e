import logging
from typing import Tuple

import numpy as np

from .errors import ValidationError

logger = logging.getLogger("mfbsde")

MAX_DEGREE = 5


def basis_degree(regression_basis: str, degree: int) -> int:
    if regression_basis == "affine":
        return 1
    if regression_basis == "polynomial":
        if not 1 <= degree <= MAX_DEGREE:
            raise ValidationError(f"polynomial degree must lie in [1, {MAX_DEGREE}], got {degree}")
        return degree
    raise ValidationError(f"unknown regression basis '{regression_basis}'")


class SliceRegression:
    """Least-squares projection on polynomials of one time slice of the state.

    Features are standardized before the fit. A constant slice carries no information,
    so every target is projected on its ensemble mean; a rank-deficient non-constant
    design falls back the same way and sets ``rank_deficient``.
    """

    def __init__(self, features: np.ndarray, degree: int = 1):
        self.degree = degree
        self.size = features.shape[0]
        self.center = float(np.mean(features))
        self.scale = float(np.std(features))
        self.constant = self.scale <= 1e-12 * max(1.0, abs(self.center))
        self.rank_deficient = False

        if not self.constant:
            self.s = (features - self.center) / self.scale

    def fit(self, targets: np.ndarray) -> np.ndarray:
        """Coefficients in increasing powers of the standardized feature, one column per target"""

        targets = np.asarray(targets, dtype=float)
        flat = targets.ndim == 1
        if flat:
            targets = targets[:, None]

        coef = np.zeros((self.degree + 1, targets.shape[1]))
        if self.constant:
            coef[0] = targets.mean(axis=0)
        else:
            fitted, _, rank, _, _ = np.polyfit(self.s, targets, self.degree, full=True)
            if rank < self.degree + 1:
                self.rank_deficient = True
                coef[0] = targets.mean(axis=0)
            else:
                coef = fitted[::-1]

        return coef[:, 0] if flat else coef

    def predict(self, coef: np.ndarray) -> np.ndarray:
        if self.constant:
            return np.broadcast_to(coef[0], (self.size,) + np.shape(coef)[1:]).copy()
        return np.vander(self.s, self.degree + 1, increasing=True) @ coef

    def project(self, targets: np.ndarray) -> np.ndarray:
        return self.predict(self.fit(targets))

    def __call__(self, targets: np.ndarray) -> np.ndarray:
        return self.project(targets)


def regress_now(
        features: np.ndarray,
        y_next: np.ndarray,
        dw: np.ndarray,
        dt: float,
        degree: int
    ) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Ê[y_{i+1} | x_i] and Ê[y_{i+1} ΔW_i | x_i] / dt by projection on basis(x_i)"""

    reg = SliceRegression(features, degree)
    fitted = reg.project(np.column_stack((y_next, y_next * dw)))

    return fitted[:, 0], fitted[:, 1] / dt, reg.rank_deficient


def _gaussian_moments(mean: np.ndarray, var: float, order: int) -> list:
    """E[S^k], k = 0..order, for S ~ N(mean, var)"""

    moments = [np.ones_like(mean), mean]
    for k in range(2, order + 1):
        moments.append(mean * moments[k - 1] + (k - 1) * var * moments[k - 2])
    return moments[:order + 1]


def regress_later(
        features_next: np.ndarray,
        y_next: np.ndarray,
        dw: np.ndarray,
        sigma: float,
        dt: float,
        degree: int
    ) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Fit y_{i+1} ≈ g(x_{i+1}) and integrate g against the Gaussian step of the state.

    With x_{i+1} = m_i + σΔW_i and m_i known at t_i, returns E[g(m_i + σG)] and
    σE[g'(m_i + σG)] for G ~ N(0, dt).
    """

    reg = SliceRegression(features_next, degree)
    coef = reg.fit(y_next)

    if reg.constant or reg.rank_deficient:
        n = features_next.shape[0]
        return np.full(n, coef[0]), np.zeros(n), reg.rank_deficient

    # moments of the standardized state given t_i
    mean = (features_next - sigma * dw - reg.center) / reg.scale
    var = sigma * sigma * dt / (reg.scale * reg.scale)
    moments = _gaussian_moments(mean, var, degree)

    cont = sum(coef[k] * moments[k] for k in range(degree + 1))
    slope = sum(k * coef[k] * moments[k - 1] for k in range(1, degree + 1)) / reg.scale

    return cont, sigma * slope, False
