"""Backward solver for the dual obstacle problem on a log grid.

In z = ln y the dual operator
    -v_t - (a^2/2) y^2 v_yy - (beta - r) y v_y + beta v
has constant coefficients,
    -v_t - (a^2/2) v_zz - (beta - r - a^2/2) v_z + beta v,
so one three-point stencil serves every interior node.  Each time level is
a linear complementarity problem solved by projected SOR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .model import (CaseLabel, HullData, ModelParams, NoConvergence,
                    classify_case, eval_dual_obstacle)


class InvalidGrid(ValueError):
    pass


FLOOR_BCS = ("loglinear", "linear")


@dataclass(frozen=True)
class SolverConfig:
    """Time weighting and LCP iteration controls.

    ``floor_bc`` selects the far-field row at y_min: "loglinear" sets the
    second difference of ln v to zero (exact for a pure power of y),
    "linear" sets the second difference of v to zero.
    """

    theta: float = 1.0
    psor_omega: float = 1.5
    psor_tol: float = 1e-10
    psor_max_iter: int = 10_000
    exercise_tol: float = 1e-12
    floor_bc: str = "loglinear"

    def __post_init__(self):
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0.5, 1], got {self.theta}")
        if not 0.0 < self.psor_omega < 2.0:
            raise ValueError(f"psor_omega must lie in (0, 2), got {self.psor_omega}")
        if not self.psor_tol > 0.0:
            raise ValueError("psor_tol must be positive")
        if self.psor_max_iter < 1:
            raise ValueError("psor_max_iter must be at least 1")
        if not self.exercise_tol > 0.0:
            raise ValueError("exercise_tol must be positive")
        if self.floor_bc not in FLOOR_BCS:
            raise ValueError(f"floor_bc must be one of {FLOOR_BCS}")


@dataclass(frozen=True, eq=False)
class DualGrid:
    z: np.ndarray
    dz: float
    n_time: int
    dt: float
    T: float
    k_cell: int  # z[k_cell] < ln k < z[k_cell + 1]

    @property
    def y(self) -> np.ndarray:
        return np.exp(self.z)

    @property
    def y_min(self) -> float:
        return float(math.exp(self.z[0]))

    @property
    def y_max(self) -> float:
        return float(math.exp(self.z[-1]))

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_time + 1)

    @property
    def n_space(self) -> int:
        return self.z.size

    def local_cell(self, y: float) -> float:
        """Width in y of the grid cell around y."""
        return float(y * (math.exp(self.dz) - 1.0))


def build_grid(p: ModelParams, h: HullData, n_space: int, n_time: int,
               y_min: Optional[float] = None, y_max: Optional[float] = None) -> DualGrid:
    """Uniform grid in z = ln y on [k 1e-4, k 1e2], shifted so ln k sits
    at the midpoint of a cell (the shift is at most half a cell)."""
    if n_space < 50 or n_time < 50:
        raise InvalidGrid("need n_space >= 50 and n_time >= 50")
    y_min = h.k * 1e-4 if y_min is None else float(y_min)
    y_max = h.k * 1e2 if y_max is None else float(y_max)
    if not 0.0 < y_min < h.k < y_max:
        raise InvalidGrid(f"need 0 < y_min < k < y_max, got {y_min}, {h.k}, {y_max}")
    z0, z1 = math.log(y_min), math.log(y_max)
    dz = (z1 - z0) / (n_space - 1)
    zk = math.log(h.k)
    pos = (zk - z0) / dz
    shift = (pos - math.floor(pos) - 0.5) * dz
    z = z0 + shift + dz * np.arange(n_space)
    k_cell = int(math.floor((zk - z[0]) / dz))
    if not (0 <= k_cell < n_space - 1 and z[k_cell] < zk < z[k_cell + 1]):
        raise InvalidGrid("could not place ln k strictly inside a cell")
    return DualGrid(z=z, dz=dz, n_time=n_time, dt=p.T / n_time, T=p.T, k_cell=k_cell)


@dataclass(frozen=True)
class Stencil:
    """Spatial operator (A v)_i = lower v_{i-1} + diag v_i + upper v_{i+1}."""

    lower: float
    diag: float
    upper: float
    dt: float
    upwind: bool

    def apply(self, v: np.ndarray) -> np.ndarray:
        """A v at interior nodes (length n - 2)."""
        return self.lower * v[:-2] + self.diag * v[1:-1] + self.upper * v[2:]


def assemble_operator(grid: DualGrid, p: ModelParams) -> Stencil:
    alpha = 0.5 * p.a_sq
    drift = p.beta - p.r - 0.5 * p.a_sq
    dz = grid.dz
    diff = alpha / dz ** 2
    if abs(drift) * dz <= 2.0 * alpha:
        lower = -diff + drift / (2.0 * dz)
        upper = -diff - drift / (2.0 * dz)
        diag = 2.0 * diff + p.beta
        upwind = False
    elif drift > 0.0:
        lower = -diff
        upper = -diff - drift / dz
        diag = 2.0 * diff + drift / dz + p.beta
        upwind = True
    else:
        lower = -diff + drift / dz
        upper = -diff
        diag = 2.0 * diff - drift / dz + p.beta
        upwind = True
    return Stencil(lower=lower, diag=diag, upper=upper, dt=grid.dt, upwind=upwind)


@njit(cache=True, nogil=True)
def _psor(v, q, obstacle, lo, di, up, omega, tol, max_iter, v_right, loglinear):
    n = v.size
    v[n - 1] = v_right
    for it in range(1, max_iter + 1):
        err = 0.0
        if loglinear and v[2] > 0.0 and v[1] > 0.0:
            cand = v[1] * v[1] / v[2]
        else:
            cand = 2.0 * v[1] - v[2]
        new = max(obstacle[0], cand)
        err = max(err, abs(new - v[0]))
        v[0] = new
        for i in range(1, n - 1):
            gs = (q[i] - lo * v[i - 1] - up * v[i + 1]) / di
            new = max(obstacle[i], v[i] + omega * (gs - v[i]))
            err = max(err, abs(new - v[i]))
            v[i] = new
        if err <= tol:
            return it
    return -1


def lcp_matrix(stencil: Stencil, cfg: SolverConfig) -> tuple[float, float, float]:
    """Coefficients of M = I + theta dt A."""
    w = cfg.theta * stencil.dt
    return w * stencil.lower, 1.0 + w * stencil.diag, w * stencil.upper


def lcp_rhs(v_next: np.ndarray, stencil: Stencil, cfg: SolverConfig) -> np.ndarray:
    q = v_next.copy()
    if cfg.theta < 1.0:
        q[1:-1] -= (1.0 - cfg.theta) * stencil.dt * stencil.apply(v_next)
    return q


def step_backward(v_next: np.ndarray, obstacle: np.ndarray, stencil: Stencil,
                  cfg: SolverConfig, upper_value: Optional[float] = None,
                  start: Optional[np.ndarray] = None) -> tuple[np.ndarray, int]:
    """One backward level: solve M v >= q, v >= obstacle, complementarity.

    Rows: Dirichlet ``upper_value`` at the last node (defaults to the
    obstacle there), projected far-field extrapolation at the first node,
    theta-scheme rows in between.  Returns (v, sweeps).
    """
    v_next = np.asarray(v_next, dtype=float)
    obstacle = np.asarray(obstacle, dtype=float)
    q = lcp_rhs(v_next, stencil, cfg)
    lo, di, up = lcp_matrix(stencil, cfg)
    v = np.maximum(v_next if start is None else start, obstacle).astype(float)
    right = obstacle[-1] if upper_value is None else float(upper_value)
    sweeps = _psor(v, q, obstacle, lo, di, up, cfg.psor_omega, cfg.psor_tol,
                   cfg.psor_max_iter, right, cfg.floor_bc == "loglinear")
    if sweeps < 0:
        raise NoConvergence(
            f"PSOR did not converge within {cfg.psor_max_iter} sweeps",
            cfg.psor_max_iter)
    return v, sweeps


@dataclass(eq=False)
class DualSolution:
    """v[j, i] = v(y_i, t_j); row j = n_time is the terminal level psi.

    Boundary curves hold NaN where a boundary is absent.  ``h_floor`` marks
    levels where the lower exercise interval reaches the first node.
    """

    grid: DualGrid
    params: ModelParams
    hull: HullData
    config: SolverConfig
    v: np.ndarray
    psi: np.ndarray
    exercise_mask: np.ndarray
    h_curve: np.ndarray
    g_curve: np.ndarray
    f_curve: np.ndarray
    h_floor: np.ndarray
    case_label: CaseLabel
    sweeps: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.grid.t

    @property
    def y(self) -> np.ndarray:
        return self.grid.y


def exercise_mask(v: np.ndarray, psi: np.ndarray, tol: float) -> np.ndarray:
    """Nodes where v meets the obstacle.

    The first node carries an extrapolation row rather than a
    complementarity row, so it inherits the status of its neighbour.
    """
    mask = v - psi <= tol * (1.0 + np.abs(psi))
    mask[..., 0] = mask[..., 1]
    return mask


def _subcell(z, gap, e, c, c2):
    """Place a free boundary between exercised node e and continuation node c.

    Near a smooth-fit contact the gap grows quadratically, so sqrt(gap) is
    extrapolated linearly through nodes c and c2 to its zero, then clipped
    into the cell [e, c].
    """
    ze, zc = z[e], z[c]
    if c2 is None:
        return math.exp(ze)
    s1, s2 = math.sqrt(max(gap[c], 0.0)), math.sqrt(max(gap[c2], 0.0))
    if not s2 > s1:
        return math.exp(ze)
    zb = zc - s1 * (z[c2] - zc) / (s2 - s1)
    lo, hi = min(ze, zc), max(ze, zc)
    return math.exp(min(max(zb, lo), hi))


def extract_boundaries(grid: DualGrid, v_level: np.ndarray, psi: np.ndarray,
                       mask_level: np.ndarray) -> tuple[float, float, float, bool]:
    """(h, g, f, h_at_floor) for one level; NaN marks an absent boundary."""
    z = grid.z
    n = z.size
    kc = grid.k_cell
    gap = v_level - psi
    below = np.flatnonzero(mask_level[:kc + 1])
    above = np.flatnonzero(mask_level[kc + 1:]) + kc + 1
    h = g = f = math.nan
    floor = False
    if below.size:
        i_h, i_g = int(below[0]), int(below[-1])
        floor = i_h == 0
        if floor or mask_level[i_h - 1]:
            h = math.exp(z[i_h])
        else:
            h = _subcell(z, gap, i_h, i_h - 1, i_h - 2 if i_h >= 2 else None)
        if i_g + 1 <= kc and not mask_level[i_g + 1]:
            nxt = i_g + 2 if i_g + 2 <= kc and not mask_level[i_g + 2] else None
            g = _subcell(z, gap, i_g, i_g + 1, nxt)
        else:
            g = math.exp(z[i_g])
    if above.size:
        i_f = int(above[0])
        if i_f - 1 > kc and not mask_level[i_f - 1]:
            prv = i_f - 2 if i_f - 2 > kc and not mask_level[i_f - 2] else None
            f = _subcell(z, gap, i_f, i_f - 1, prv)
        else:
            f = math.exp(z[i_f])
    return h, g, f, floor


def solve_dual(p: ModelParams, h: HullData, grid: DualGrid,
               cfg: SolverConfig = SolverConfig()) -> DualSolution:
    """March the obstacle problem from v(., T) = psi back to t = 0."""
    psi = eval_dual_obstacle(grid.y, h, p)[0]
    stencil = assemble_operator(grid, p)
    n_lev = grid.n_time + 1
    v = np.empty((n_lev, grid.n_space))
    v[-1] = psi
    sweeps = np.zeros(n_lev, dtype=int)
    top = p.floor_utility
    for j in range(grid.n_time - 1, -1, -1):
        v[j], sweeps[j] = step_backward(v[j + 1], psi, stencil, cfg, upper_value=top)
    mask = exercise_mask(v, psi, cfg.exercise_tol)
    hc = np.full(n_lev, math.nan)
    gc = np.full(n_lev, math.nan)
    fc = np.full(n_lev, math.nan)
    floor = np.zeros(n_lev, dtype=bool)
    for j in range(n_lev):
        hc[j], gc[j], fc[j], floor[j] = extract_boundaries(grid, v[j], psi, mask[j])
    return DualSolution(grid=grid, params=p, hull=h, config=cfg, v=v, psi=psi,
                        exercise_mask=mask, h_curve=hc, g_curve=gc, f_curve=fc,
                        h_floor=floor, case_label=classify_case(p, h), sweeps=sweeps)


def lcp_residual(sol: DualSolution) -> np.ndarray:
    """min(M v^j - q^j, v^j - psi) at interior nodes for every level t < T."""
    stencil = assemble_operator(sol.grid, sol.params)
    lo, di, up = lcp_matrix(stencil, sol.config)
    out = np.empty((sol.grid.n_time, sol.grid.n_space - 2))
    for j in range(sol.grid.n_time):
        q = lcp_rhs(sol.v[j + 1], stencil, sol.config)
        vj = sol.v[j]
        mv = lo * vj[:-2] + di * vj[1:-1] + up * vj[2:]
        out[j] = np.minimum(mv - q[1:-1], vj[1:-1] - sol.psi[1:-1])
    return out


def upper_bound_constants(p: ModelParams, h: HullData) -> tuple[float, float]:
    """(A, B) of the supersolution A (e^{B (T-t)} y^{gamma/(gamma-1)} + 1)."""
    g = p.gamma
    A = max((1.0 - g) / g, p.floor_utility, abs(p.K - p.b) * h.k)
    B = 0.5 * p.a_sq * g / (g - 1.0) ** 2 + (p.beta - p.r * g) / (g - 1.0)
    return A, B


def first_differences(grid: DualGrid, v: np.ndarray) -> np.ndarray:
    """Divided differences in y between neighbouring nodes (last axis)."""
    return np.diff(v, axis=-1) / np.diff(grid.y)


def second_differences(grid: DualGrid, v: np.ndarray) -> np.ndarray:
    """Three-point divided second differences in y at interior nodes."""
    y = grid.y
    h0 = y[1:-1] - y[:-2]
    h1 = y[2:] - y[1:-1]
    s0 = (v[..., 1:-1] - v[..., :-2]) / h0
    s1 = (v[..., 2:] - v[..., 1:-1]) / h1
    return 2.0 * (s1 - s0) / (h0 + h1)


@dataclass
class BoundsReport:
    """Worst violation of each structural property (positive = violated,
    except ``min_vyy_below_f`` which should be strictly positive)."""

    lower: float
    upper: float
    v_t: float
    v_y: float
    v_yy: float
    min_vyy_below_f: float
    complementarity: float
    A: float
    B: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def verify_bounds(sol: DualSolution, p: Optional[ModelParams] = None,
                  h: Optional[HullData] = None) -> BoundsReport:
    p = sol.params if p is None else p
    h = sol.hull if h is None else h
    grid = sol.grid
    A, B = upper_bound_constants(p, h)
    y = grid.y
    t = grid.t
    v = sol.v
    n_lev, n = v.shape
    # the single cell touching the corner (k, T) is excluded
    keep = np.ones_like(v, dtype=bool)
    kc = grid.k_cell
    keep[n_lev - 2:, kc:kc + 2] = False

    lower = float(np.max(np.where(keep, sol.psi - v, -np.inf)))
    w = A * (np.exp(B * (p.T - t))[:, None] * y[None, :] ** p.q + 1.0)
    upper = float(np.max(np.where(keep, v - w, -np.inf)))

    vt = (v[1:] - v[:-1]) / grid.dt
    keep_t = keep[1:] & keep[:-1]
    v_t = float(np.max(np.where(keep_t, vt, -np.inf)))

    vy = first_differences(grid, v)
    keep_y = keep[:, 1:] & keep[:, :-1]
    v_y = float(np.max(np.where(keep_y, vy, -np.inf)))

    vyy = second_differences(grid, v)
    keep_yy = keep[:, 1:-1] & keep[:, :-2] & keep[:, 2:]
    v_yy = float(-np.min(np.where(keep_yy, vyy, np.inf)))

    below_f = y[None, 1:-1] < sol.f_curve[:, None]
    below_f[-1] = False
    sel = keep_yy & below_f
    min_vyy = float(np.min(vyy[sel])) if sel.any() else math.nan

    comp = float(np.max(np.abs(lcp_residual(sol))))
    return BoundsReport(lower=lower, upper=upper, v_t=v_t, v_y=v_y, v_yy=v_yy,
                        min_vyy_below_f=min_vyy, complementarity=comp, A=A, B=B)
