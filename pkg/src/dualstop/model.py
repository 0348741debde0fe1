"""Closed-form model quantities: market/preference parameters, the payoff,
its concave hull, the dual obstacle and the regime classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DomainError(ValueError):
    """Argument outside the domain of a closed-form expression."""


class NoConvergence(RuntimeError):
    def __init__(self, message: str, iterations: int = 0):
        super().__init__(message)
        self.iterations = iterations


class ParameterError(ValueError):
    """A ModelParams invariant is violated."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Market (r, mu, sigma) and preference (gamma, b, K, beta, T) constants.

    ``mu`` is the excess-return vector and ``sigma`` the n x n volatility
    matrix; scalars are promoted to the one-asset case.  ``a_sq`` is the
    squared market price of risk mu'(sigma sigma')^{-1} mu.
    """

    r: float
    mu: np.ndarray
    sigma: np.ndarray
    gamma: float
    b: float
    K: float
    beta: float
    T: float
    a_sq: float = field(init=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).copy()
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float)).copy()
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        for name in ("r", "gamma", "b", "K", "beta", "T"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.K <= 0.0:
            raise ParameterError(f"K must be positive, got {self.K}")
        if self.b < 0.0:
            raise ParameterError(f"b must be nonnegative, got {self.b}")
        if self.T <= 0.0:
            raise ParameterError(f"T must be positive, got {self.T}")
        if self.beta < 0.0:
            raise ParameterError(f"beta must be nonnegative, got {self.beta}")
        if self.r < 0.0:
            raise ParameterError(f"r must be nonnegative, got {self.r}")
        n = mu.size
        if sigma.shape != (n, n):
            raise ParameterError(
                f"sigma must be {n}x{n} to match mu, got shape {sigma.shape}")
        cov = sigma @ sigma.T
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ParameterError("sigma sigma' must be positive definite") from None
        a_sq = float(mu @ np.linalg.solve(cov, mu))
        if not a_sq > 0.0:
            raise ParameterError("mu must be nonzero (a^2 = 0)")
        object.__setattr__(self, "a_sq", a_sq)

    @property
    def n_assets(self) -> int:
        return self.mu.size

    @property
    def covariance(self) -> np.ndarray:
        return self.sigma @ self.sigma.T

    def merton_direction(self) -> np.ndarray:
        """(sigma sigma')^{-1} mu, the direction of every optimal portfolio."""
        return np.linalg.solve(self.covariance, self.mu)

    def market_price_of_risk(self) -> np.ndarray:
        """sigma^{-1} mu."""
        return np.linalg.solve(self.sigma, self.mu)

    @property
    def q(self) -> float:
        """Exponent gamma/(gamma-1) of the dual power term."""
        return self.gamma / (self.gamma - 1.0)

    @property
    def floor_utility(self) -> float:
        """g(0) = K^gamma / gamma."""
        return self.K ** self.gamma / self.gamma

    def as_dict(self) -> dict:
        return {
            "r": self.r, "mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
            "gamma": self.gamma, "b": self.b, "K": self.K, "beta": self.beta,
            "T": self.T, "a_sq": self.a_sq,
        }


def eval_payoff(x, p: ModelParams):
    """g(x) = ((x - b)^+ + K)^gamma / gamma."""
    x = np.asarray(x, dtype=float)
    out = (np.maximum(x - p.b, 0.0) + p.K) ** p.gamma / p.gamma
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class HullData:
    k: float
    x_hat: float


def _hull_residuals(x_hat: float, k: float, p: ModelParams) -> tuple[float, float]:
    s = x_hat - p.b + p.K
    value = k * x_hat + p.floor_utility - s ** p.gamma / p.gamma
    slope = k - s ** (p.gamma - 1.0)
    return value, slope


def hull_residuals(h: HullData, p: ModelParams) -> tuple[float, float]:
    """Residuals of the tangency (value) and smooth-pasting (slope) equations."""
    return _hull_residuals(h.x_hat, h.k, p)


def compute_hull(p: ModelParams, tol: float = 1e-12, max_iter: int = 400) -> HullData:
    """Concave hull of the payoff: tangent line from (0, g(0)) to the power branch.

    Bisection on the tangency residual after eliminating
    k = (x_hat - b + K)^(gamma-1).  The residual is strictly increasing in
    x_hat on (b, inf), negative at b and positive for large x_hat.
    """
    if p.b == 0.0:
        return HullData(k=p.K ** (p.gamma - 1.0), x_hat=0.0)

    def reduced(x):
        s = x - p.b + p.K
        return (s ** p.gamma * (1.0 / p.gamma - 1.0) - p.floor_utility
                - (p.b - p.K) * s ** (p.gamma - 1.0))

    lo, hi = p.b, 2.0 * p.b + p.K
    it = 0
    while reduced(hi) <= 0.0:
        lo, hi = hi, 2.0 * hi
        it += 1
        if it > 200 or not math.isfinite(hi):
            raise NoConvergence("no sign change bracketing the tangency point", it)
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        if reduced(mid) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    else:
        raise NoConvergence("hull bisection did not reach tolerance", max_iter)
    x_hat = 0.5 * (lo + hi)
    return HullData(k=(x_hat - p.b + p.K) ** (p.gamma - 1.0), x_hat=x_hat)


def eval_hull(x, h: HullData, p: ModelParams):
    """(phi(x), phi'(x)): linear piece below x_hat, power piece from x_hat on."""
    x = np.asarray(x, dtype=float)
    s = np.maximum(x - p.b + p.K, p.K)
    power = s ** p.gamma / p.gamma
    power_slope = s ** (p.gamma - 1.0)
    linear = h.k * x + p.floor_utility
    below = x < h.x_hat
    value = np.where(below, linear, power)
    slope = np.where(below, h.k, power_slope)
    if value.ndim == 0:
        return float(value), float(slope)
    return value, slope


def eval_dual_obstacle(y, h: HullData, p: ModelParams):
    """(psi, psi', psi'') with psi(y) = max_x (phi(x) - x y).

    The kink at y = k takes the values of the flat piece.
    """
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0.0)):
        raise DomainError("dual obstacle requires y > 0")
    g = p.gamma
    below = y < h.k
    yb = np.where(below, y, 1.0)
    inner = yb ** (1.0 / (g - 1.0))
    psi_b = (1.0 - g) / g * yb ** (g / (g - 1.0)) + (p.K - p.b) * yb
    d1_b = -inner + (p.K - p.b)
    d2_b = inner / yb / (1.0 - g)
    value = np.where(below, psi_b, p.floor_utility)
    d1 = np.where(below, d1_b, 0.0)
    d2 = np.where(below, d2_b, 0.0)
    if value.ndim == 0:
        return float(value), float(d1), float(d2)
    return value, d1, d2


def psi_coefficient(p: ModelParams) -> float:
    """Coefficient of y^(gamma/(gamma-1)) in Psi; equals (beta - threshold)/gamma."""
    return (p.beta - p.r * p.gamma) / p.gamma - 0.5 * p.a_sq / (1.0 - p.gamma)


def eval_Psi(y, p: ModelParams):
    """Dual operator applied to the curved branch of psi."""
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0.0)):
        raise DomainError("Psi requires y > 0")
    out = psi_coefficient(p) * y ** p.q + p.r * (p.K - p.b) * y
    return out if out.ndim else float(out)


def case_threshold(p: ModelParams) -> float:
    return 0.5 * p.a_sq * p.gamma / (1.0 - p.gamma) + p.r * p.gamma


CASES = ("I", "II_strict", "II_equal", "III", "IV")


@dataclass(frozen=True)
class CaseLabel:
    case_id: str
    threshold: float
    psi_at_k: float
    y_T: Optional[float] = None

    def as_dict(self) -> dict:
        return {"case": self.case_id, "threshold": self.threshold,
                "psi_at_k": self.psi_at_k, "y_T": self.y_T}


def root_of_Psi(p: ModelParams) -> Optional[float]:
    """Positive root of Psi, when one exists."""
    c1 = psi_coefficient(p)
    c2 = p.r * (p.K - p.b)
    if c1 == 0.0 or c2 == 0.0 or (c1 > 0.0) == (c2 > 0.0):
        return None
    return (-c2 / c1) ** (p.gamma - 1.0)


def classify_case(p: ModelParams, h: HullData, tol: float = 1e-12) -> CaseLabel:
    """Regime of the dual free boundaries.

    Both sign tests use an absolute tolerance; values within it count as
    zero, so beta == threshold is reachable in floating point.
    """
    theta = case_threshold(p)
    psi_k = eval_Psi(h.k, p)
    gap = p.beta - theta
    if gap >= -tol:
        if psi_k >= -tol:
            case = "I"
        elif abs(gap) <= tol:
            case = "II_equal"
        else:
            case = "II_strict"
    elif psi_k > tol:
        case = "III"
    else:
        case = "IV"
    y_T = root_of_Psi(p) if case in ("II_strict", "III") else None
    return CaseLabel(case_id=case, threshold=theta, psi_at_k=psi_k, y_T=y_T)
