"""Inverse dual transform: value function, derivatives, free boundaries and
feedback portfolio of the primal problem, recovered level by level from a
solved dual surface."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dual import DualSolution
from .model import HullData, ModelParams, eval_dual_obstacle, eval_hull


class RangeError(ValueError):
    """Requested wealth lies outside what the dual grid can resolve."""


def build_x_grid(h: HullData, n_x: int, p: Optional[ModelParams] = None) -> np.ndarray:
    """x = 0 followed by n_x geometric nodes on [x_hat 1e-3, x_hat 1e2]."""
    scale = h.x_hat if h.x_hat > 0.0 else (p.K if p is not None else 1.0)
    return np.concatenate(([0.0], np.geomspace(scale * 1e-3, scale * 1e2, n_x)))


@dataclass(eq=False)
class LevelTables:
    """Per-level, per-cell interpolation data for v on every level t < T.

    Cells are classified as continuation (cubic Hermite in z of the gap
    v - psi, with psi added back exactly; the cell holding k interpolates v
    itself since psi kinks inside it), exercised
    (v = psi) or mixed.  In a mixed cell the gap v - psi is modelled as
    c2 d^2 + c3 d^3, d = y - y_b, on the continuation side of a contact
    point y_b and zero beyond it (coefficients in ``w_coef``).
    """

    vz: np.ndarray
    vy: np.ndarray
    vyy: np.ndarray
    kind: np.ndarray
    y_b: np.ndarray
    w_coef: np.ndarray
    cont_left: np.ndarray
    psi_z: np.ndarray  # nodal z-slope of psi


HERMITE, EXERCISED, MIXED = 0, 1, 2


def nodal_derivatives(sol: DualSolution) -> LevelTables:
    """Nodal v_z, v_y, v_yy and the cell models of every level t < T.

    Exercised nodes take the closed-form obstacle derivatives.  Elsewhere
    the gap v - psi is differenced in z and the exact derivatives of psi
    are added back.
    """
    grid, p, h = sol.grid, sol.params, sol.hull
    v = sol.v[:-1]
    dz = grid.dz
    z = grid.z
    y = grid.y
    psi, d1, d2 = eval_dual_obstacle(y, h, p)
    w = v - psi[None, :]
    wz = np.empty_like(w)
    wz[:, 1:-1] = (w[:, 2:] - w[:, :-2]) / (2.0 * dz)
    wz[:, 0] = (-3.0 * w[:, 0] + 4.0 * w[:, 1] - w[:, 2]) / (2.0 * dz)
    wz[:, -1] = (3.0 * w[:, -1] - 4.0 * w[:, -2] + w[:, -3]) / (2.0 * dz)
    wzz = np.empty_like(w)
    wzz[:, 1:-1] = (w[:, 2:] - 2.0 * w[:, 1:-1] + w[:, :-2]) / dz ** 2
    wzz[:, 0] = wzz[:, 1]
    wzz[:, -1] = wzz[:, -2]
    # the two nodes of the cell holding k take one-sided slopes from their
    # own side; centred ones would straddle the kink of psi, which v keeps
    # sharper than a cell near T
    kc = grid.k_cell
    a, b = w[:, kc - 2:kc + 1], w[:, kc + 1:kc + 4]
    wz[:, kc] = (3.0 * a[:, 2] - 4.0 * a[:, 1] + a[:, 0]) / (2.0 * dz)
    wz[:, kc + 1] = (-3.0 * b[:, 0] + 4.0 * b[:, 1] - b[:, 2]) / (2.0 * dz)
    # where a cell's cubic would dip below zero between nonnegative node
    # gaps, Hyman's filter caps the slopes at its nodes (three times the
    # smaller one-sided slope where the gap is monotone)
    dl = (w[:, 1:-1] - w[:, :-2]) / dz
    dr = (w[:, 2:] - w[:, 1:-1]) / dz
    mono = dl * dr > 0.0
    cap = 3.0 * np.minimum(np.abs(dl), np.abs(dr))
    capped = np.sign(wz[:, 1:-1]) * np.minimum(np.abs(wz[:, 1:-1]), cap)
    sg = np.linspace(0.0, 1.0, 17)[1:-1, None, None]
    dip = np.min(_hermite(sg, dz, w[:, :-1], w[:, 1:], wz[:, :-1], wz[:, 1:])[0], axis=0)
    dip = dip < np.minimum(0.0, np.minimum(w[:, :-1], w[:, 1:]))
    near = dip[:, :-1] | dip[:, 1:]
    wz[:, 1:-1] = np.where(near & mono, capped, wz[:, 1:-1])
    psi_z = y * d1
    vz = wz + psi_z[None, :]
    vzz = wzz + (y * y * d2 + psi_z)[None, :]
    # w kinks at k, so its second difference there is taken on v itself
    for i in (kc, kc + 1):
        vzz[:, i] = (v[:, i + 1] - 2.0 * v[:, i] + v[:, i - 1]) / dz ** 2

    mask = sol.exercise_mask[:-1]
    vz = np.where(mask, (y * d1)[None, :], vz)
    vy = vz * np.exp(-z)[None, :]
    vyy = (vzz - vz) * np.exp(-2.0 * z)[None, :]
    vyy = np.where(mask, d2[None, :], vyy)

    left, right = mask[:, :-1], mask[:, 1:]
    kind = np.where(left & right, EXERCISED, np.where(left | right, MIXED, HERMITE))
    cont_left = ~left
    jm, im = np.nonzero(kind == MIXED)
    fit = _fit_contacts(sol, v - psi[None, :], mask, jm, im, cont_left[jm, im])
    ok, yb, c2, c3, spill = fit
    kind[jm[~ok], im[~ok]] = HERMITE
    shape = kind.shape
    y_b = np.zeros(shape)
    w2 = np.zeros(shape)
    w3 = np.zeros(shape)
    jm, im, spill = jm[ok], im[ok], spill[ok]
    y_b[jm, im], w2[jm, im], w3[jm, im] = yb[ok], c2[ok], c3[ok]
    # continuation nodes next to a contact take the model's derivatives
    left = cont_left[jm, im]
    ic = np.where(left, im, im + 1)
    nodes = [ic]
    # a contact past the exercised node: its neighbour cell shares the model
    # and the exercised node takes the model's derivatives as well
    sp = spill >= 0
    if np.any(sp):
        js, cs = jm[sp], spill[sp]
        kind[js, cs] = MIXED
        cont_left[js, cs] = left[sp]
        y_b[js, cs], w2[js, cs], w3[js, cs] = yb[ok][sp], c2[ok][sp], c3[ok][sp]
        nodes.append(np.where(left[sp], im[sp] + 1, im[sp]))
    for k, node in enumerate(nodes):
        jj = jm if k == 0 else jm[sp]
        src = (jj, im if k == 0 else im[sp])
        d = y[node] - y_b[src]
        vy[jj, node] = d1[node] + 2.0 * w2[src] * d + 3.0 * w3[src] * d * d
        vz[jj, node] = vy[jj, node] * y[node]
        vyy[jj, node] = d2[node] + 2.0 * w2[src] + 6.0 * w3[src] * d
    # floor node: continue the power-law decay of v_yy from its neighbours
    pos = (vyy[:, 1] > 0.0) & (vyy[:, 2] > 0.0)
    vyy[:, 0] = np.where(pos, vyy[:, 1] ** 2 / np.where(pos, vyy[:, 2], 1.0), vyy[:, 1])
    vy = np.maximum.accumulate(vy, axis=1)
    return LevelTables(vz=vz, vy=vy, vyy=vyy, kind=kind, y_b=y_b,
                       w_coef=np.stack([w2, w3]), cont_left=cont_left, psi_z=y * d1)


def obstacle_generator(y, h: HullData, p: ModelParams):
    """The dual operator applied to psi (no time derivative).

    Equals Psi below k and beta K^gamma/gamma above it.
    """
    psi, d1, d2 = eval_dual_obstacle(y, h, p)
    return -0.5 * p.a_sq * y * y * d2 - (p.beta - p.r) * y * d1 + p.beta * psi


def _fit_contacts(sol: DualSolution, gap, mask, jm, im, cont_left):
    """Contact point and cubic gap model for each mixed cell (jm, im).

    At a moving contact y_b the gap and its slope vanish and so does v_t,
    which fixes the one-sided curvature w'' = 2 (L psi)(y_b) / (a^2 y_b^2).
    y_b and the cubic coefficient are then matched to the gaps at the two
    nearest continuation nodes.  The contact may lie up to one cell past
    the exercised node (the discrete active set can lag it by a node); the
    cell it spills into then shares the model.  Otherwise a contact that
    would fall outside the cell is pinned to the exercised node and both
    coefficients are fitted.
    """
    grid, p, h = sol.grid, sol.params, sol.hull
    y = grid.y
    n = y.size
    kc = grid.k_cell
    ic = np.where(cont_left, im, im + 1)
    ie = np.where(cont_left, im + 1, im)
    i2 = ic + np.where(cont_left, -1, 1)
    inside = (i2 >= 0) & (i2 < n)
    i2 = np.clip(i2, 0, n - 1)
    yc, ye, y2 = y[ic], y[ie], y[i2]
    w1 = gap[jm, ic]
    wf = gap[jm, i2]
    # the gap is kinked at k, so neither the cell nor the fit may cross it
    same = (i2 <= kc) == (ic <= kc)
    has2 = inside & same & ~mask[jm, i2] & (wf > w1)
    ok = (w1 > 0.0) & (im != kc)
    # the contact may sit up to one cell past the exercised node when the
    # discrete active set lags it; that cell must be fully exercised
    ib = ie + np.where(cont_left, 1, -1)
    nb = np.minimum(ie, ib)
    room = (ib >= 0) & (ib < n)
    ib = np.clip(ib, 0, n - 1)
    nb = np.clip(nb, 0, n - 2)
    room &= mask[jm, ib] & (nb != kc) & (nb != im)
    yx = np.where(room, y[ib], ye)

    def curvature(yb):
        return obstacle_generator(yb, h, p) / (p.a_sq * yb * yb)

    def mismatch(yb):
        c2 = curvature(yb)
        e1, e2 = yc - yb, y2 - yb
        with np.errstate(divide="ignore", invalid="ignore"):
            c3 = np.where(has2, (w1 - c2 * e1 * e1) / (e1 ** 3), 0.0)
            f = np.where(has2, c2 * e2 * e2 + c3 * e2 ** 3 - wf, c2 * e1 * e1 - w1)
        return f, c2, c3

    # f(y_b) < 0 just past the continuation node (>0 in the two-node form
    # below); a sign change at the exercised end brackets the contact
    sign = np.where(has2, 1.0, -1.0)
    f_end, _, _ = mismatch(ye)
    inner = sign * f_end < 0.0
    f_far, _, _ = mismatch(yx)
    outer = ~inner & room & (sign * f_far < 0.0) & (curvature(yx) > 0.0)
    root = ok & (curvature(ye) > 0.0) & (inner | outer)
    lo, hi = np.where(outer, ye, yc), np.where(outer, yx, ye)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f, _, _ = mismatch(mid)
        towards_e = sign * f > 0.0
        lo = np.where(towards_e, mid, lo)
        hi = np.where(towards_e, hi, mid)
    yb = np.where(root, 0.5 * (lo + hi), ye)
    _, c2, c3 = mismatch(yb)
    # pinned contact: fit both coefficients at y_b = y_e
    e1, e2 = yc - ye, y2 - ye
    det = e1 * e1 * e2 ** 3 - e2 * e2 * e1 ** 3
    with np.errstate(divide="ignore", invalid="ignore"):
        p2 = np.where(has2, (w1 * e2 ** 3 - wf * e1 ** 3) / det, w1 / (e1 * e1))
        p3 = np.where(has2, (wf * e1 * e1 - w1 * e2 * e2) / det, 0.0)
    c2 = np.where(root, c2, p2)
    c3 = np.where(root, c3, p3)
    # the model must be a convex, monotone gap between y_b and y_c
    e1 = yc - yb
    slope_c = 2.0 * c2 * e1 + 3.0 * c3 * e1 * e1
    curv_c = 2.0 * c2 + 6.0 * c3 * e1
    ok &= np.isfinite(c2) & np.isfinite(c3) & (e1 != 0.0)
    ok &= (slope_c * e1 > 0.0) & (c2 > 0.0) & (curv_c > -eval_dual_obstacle(yc, h, p)[2])
    spill = ok & outer
    return ok, yb, np.where(ok, c2, 0.0), np.where(ok, c3, 0.0), np.where(spill, nb, -1)


def _hermite(s, dz, v0, v1, d0, d1):
    """Cubic Hermite value and z-derivative at fraction s of a cell."""
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    val = h00 * v0 + h10 * dz * d0 + h01 * v1 + h11 * dz * d1
    dh00 = 6 * s2 - 6 * s
    dh10 = 3 * s2 - 4 * s + 1
    dh01 = -6 * s2 + 6 * s
    dh11 = 3 * s2 - 2 * s
    der = (dh00 * v0 + dh10 * dz * d0 + dh01 * v1 + dh11 * dz * d1) / dz
    return val, der


def _interp_vyy(s, a, b):
    """Log-linear in z when both ends are positive (exact for powers of y)."""
    pos = (a > 0.0) & (b > 0.0)
    la = np.log(np.where(pos, a, 1.0))
    lb = np.log(np.where(pos, b, 1.0))
    return np.where(pos, np.exp(la + s * (lb - la)), a + s * (b - a))


def _cell_eval(sol: DualSolution, tab: LevelTables, j, i, s, slope_only=False):
    """Model (y, v, v_y, v_yy) at fraction s of cell i on level j (vectorized)."""
    grid = sol.grid
    dz = grid.dz
    zq = grid.z[i] + s * dz
    yq = np.exp(zq)
    v = sol.v
    psi, d1, d2 = eval_dual_obstacle(yq, sol.hull, sol.params)
    # off the k cell the gap is interpolated, so v stays above psi where
    # the gap is small next to a contact
    off = (i != grid.k_cell).astype(float)
    pn, pz = sol.psi, tab.psi_z
    val, der = _hermite(s, dz, v[j, i] - off * pn[i], v[j, i + 1] - off * pn[i + 1],
                        tab.vz[j, i] - off * pz[i], tab.vz[j, i + 1] - off * pz[i + 1])
    val = val + off * psi
    der = der + off * yq * d1
    kind = tab.kind[j, i]
    herm = kind == HERMITE
    mixed = kind == MIXED
    yb = tab.y_b[j, i]
    w2, w3 = tab.w_coef[0, j, i], tab.w_coef[1, j, i]
    side = mixed & np.where(tab.cont_left[j, i], yq <= yb, yq >= yb)
    d = np.where(side, yq - yb, 0.0)
    m_vy = np.where(herm, der * np.exp(-zq), d1 + 2.0 * w2 * d + 3.0 * w3 * d * d)
    if slope_only:
        return yq, None, m_vy, None
    m_v = np.where(herm, val, psi + w2 * d * d + w3 * d * d * d)
    herm_vyy = _interp_vyy(s, tab.vyy[j, i], tab.vyy[j, i + 1])
    m_vyy = np.where(herm, herm_vyy, d2 + np.where(side, 2.0 * w2 + 6.0 * w3 * d, 0.0))
    return yq, m_v, m_vy, m_vyy


def _bracket(tab: LevelTables, j, x):
    """Cell whose nodal slope range contains -x, for each (level, wealth) pair."""
    vy = tab.vy
    out = -x < vy[j, 0]
    if np.any(out):
        raise RangeError(
            f"wealth {float(np.max(x[out])):.6g} exceeds the dual grid's slope "
            "range; lower y_min")
    i = np.empty(x.shape, dtype=np.int64)
    for lev in np.unique(j):
        sel = j == lev
        i[sel] = np.searchsorted(vy[lev], -x[sel], side="right") - 1
    return np.clip(i, 0, vy.shape[1] - 2)


def _root_in_cell(sol, tab, j, i, x):
    """Rising crossing of v_y = -x in cell i, or the nearer cell end."""
    lo = np.zeros_like(x)
    hi = np.ones_like(x)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        vy = _cell_eval(sol, tab, j, i, mid, slope_only=True)[2]
        neg = vy + x <= 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    return _cell_eval(sol, tab, j, i, 0.5 * (lo + hi))


def _wiggly_cells(sol, tab, levels):
    """Cells whose model slope is not monotone, on the given levels."""
    n = sol.grid.n_space - 1
    s = np.linspace(0.0, 1.0, 9)
    jj = np.repeat(levels, n * s.size)
    ii = np.tile(np.repeat(np.arange(n), s.size), levels.size)
    ss = np.tile(s, levels.size * n)
    vy = _cell_eval(sol, tab, jj, ii, ss, slope_only=True)[2].reshape(levels.size, n, s.size)
    scale = 1e-12 * (1.0 + np.abs(vy).max(axis=2))
    out = np.zeros((sol.grid.n_time, n), dtype=bool)
    out[levels] = np.any(np.diff(vy, axis=2) < -scale[..., None], axis=2)
    return out


def _invert(sol: DualSolution, tab: LevelTables, j, x):
    """(y*, v(y*), v_yy(y*)) for positive wealths x on levels j (vectorized).

    y* minimizes v(y) + x y over the cell model.  Where a cell's model slope
    is not monotone the crossing in the bracketed cell may be only a local
    minimum, so the neighbouring cells are searched as well.
    """
    p = sol.params
    i = _bracket(tab, j, x)
    ystar, val, _, vyy = _root_in_cell(sol, tab, j, i, x)
    n = sol.grid.n_space - 1
    wig = _wiggly_cells(sol, tab, np.unique(j))
    near = wig[j, i] | wig[j, np.maximum(i - 1, 0)] | wig[j, np.minimum(i + 1, n - 1)]
    if np.any(near):
        jn, xn = j[near], x[near]
        best = (ystar[near], val[near], vyy[near])
        obj = best[1] + xn * best[0]
        for shift in (-1, 1):
            ic = np.clip(i[near] + shift, 0, n - 1)
            yc, vc, _, dc = _root_in_cell(sol, tab, jn, ic, xn)
            oc = vc + xn * yc
            take = oc < obj
            obj = np.where(take, oc, obj)
            best = tuple(np.where(take, a, b) for a, b in zip((yc, vc, dc), best))
        ystar[near], val[near], vyy[near] = best
    # fully exercised cells below k: invert psi' in closed form
    closed = (tab.kind[j, i] == EXERCISED) & (i + 1 <= sol.grid.k_cell)
    if np.any(closed):
        yc = (x[closed] + p.K - p.b) ** (p.gamma - 1.0)
        psi, _, d2 = eval_dual_obstacle(yc, sol.hull, p)
        ystar[closed] = yc
        val[closed] = psi
        vyy[closed] = d2
    return ystar, val, vyy


def _zero_wealth(sol: DualSolution, tab: LevelTables):
    """(J(0), v(J(0)), v_yy(J(0)-)) per level, read off the cell below f."""
    mask = sol.exercise_mask[:-1]
    grid = sol.grid
    kc = grid.k_cell
    n_lev = mask.shape[0]
    c = kc + np.argmax(mask[:, kc + 1:], axis=1)
    lev = np.arange(n_lev)
    y0 = sol.f_curve[:-1].copy()
    mixed = tab.kind[lev, c] == MIXED
    y0[mixed] = tab.y_b[lev[mixed], c[mixed]]
    v0, _, d2 = eval_dual_obstacle(y0, sol.hull, sol.params)
    vyy0 = np.full(n_lev, np.nan)
    vyy0[mixed] = d2[mixed] + 2.0 * tab.w_coef[0, lev[mixed], c[mixed]]
    other = ~mixed
    if np.any(other):
        z = np.log(y0[other])
        ci = np.clip(np.floor((z - grid.z[0]) / grid.dz).astype(np.int64), 0, grid.n_space - 2)
        s = (z - grid.z[ci]) / grid.dz
        v0[other] = _cell_eval(sol, tab, lev[other], ci, s)[1]
    return y0, v0, vyy0


def invert_dual_slope(x, sol: DualSolution, level: int,
                      tables: Optional[LevelTables] = None):
    """J(x, t_level): the y at which the dual slope v_y equals -x.

    x = 0 maps to the contact point with the flat part of the obstacle, f(t).
    """
    if level < 0 or level >= sol.grid.n_time:
        raise IndexError("level must address a time t < T")
    tab = nodal_derivatives(sol) if tables is None else tables
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0.0):
        raise RangeError("wealth must be nonnegative")
    out = np.full(x.shape, _zero_wealth(sol, tab)[0][level])
    pos = x > 0.0
    if np.any(pos):
        xs = x[pos]
        out[pos] = _invert(sol, tab, np.full(xs.shape, level), xs)[0]
    return out if out.size > 1 else float(out[0])


def dual_value(sol: DualSolution, level: int, y, tables: Optional[LevelTables] = None):
    """v(y, t_level) between nodes, read from the recovery's cell model."""
    grid = sol.grid
    if level < 0 or level >= grid.n_time:
        raise IndexError("level must address a time t < T")
    tab = nodal_derivatives(sol) if tables is None else tables
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(y < grid.y_min) or np.any(y > grid.y_max):
        raise RangeError("y outside the dual grid")
    z = np.log(y)
    i = np.clip(np.floor((z - grid.z[0]) / grid.dz).astype(np.int64), 0, grid.n_space - 2)
    s = (z - grid.z[i]) / grid.dz
    out = _cell_eval(sol, tab, np.full(y.shape, level), i, s)[1]
    return out if out.size > 1 else float(out[0])


def primal_value(sol: DualSolution, level: int, x, tables: Optional[LevelTables] = None):
    """(V, V_x, V_xx) at wealths x > 0 on one level, straight from the dual."""
    if level < 0 or level >= sol.grid.n_time:
        raise IndexError("level must address a time t < T")
    tab = nodal_derivatives(sol) if tables is None else tables
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0.0):
        raise RangeError("wealth must be positive")
    ystar, val, vyy = _invert(sol, tab, np.full(x.shape, level), x)
    return val + x * ystar, ystar, -1.0 / vyy


@dataclass(eq=False)
class PrimalSolution:
    """Primal surfaces on x_nodes (first node x = 0) for levels t_j < T.

    ``H_curve`` is +inf where the exercise region is unbounded above and NaN
    where it is absent; ``G_curve`` is NaN where absent.
    """

    x_nodes: np.ndarray
    t: np.ndarray
    V: np.ndarray
    Vx: np.ndarray
    Vxx: np.ndarray
    vyy: np.ndarray
    H_curve: np.ndarray
    G_curve: np.ndarray
    f_slope: np.ndarray
    params: ModelParams
    hull: HullData
    Vt: Optional[np.ndarray] = None

    @property
    def pi_scalar(self) -> np.ndarray:
        """Risk exposure -V_x / V_xx = J v_yy(J)."""
        return self.Vx * self.vyy

    def exercise_region(self, tol: float = 1e-10) -> np.ndarray:
        phi = eval_hull(self.x_nodes, self.hull, self.params)[0]
        return self.V - phi[None, :] <= tol * (1.0 + np.abs(phi))[None, :]


def primal_boundaries(sol: DualSolution) -> tuple[np.ndarray, np.ndarray]:
    """(H, G) per level t < T, mapped from the dual boundaries h and g."""
    p = sol.params
    e = 1.0 / (p.gamma - 1.0)
    h = sol.h_curve[:-1]
    g = sol.g_curve[:-1]
    floor = sol.h_floor[:-1]
    with np.errstate(invalid="ignore"):
        H = np.where(floor, np.inf, h ** e - (p.K - p.b))
        G = g ** e - (p.K - p.b)
    return H, G


def recover_primal(sol: DualSolution, x_nodes: np.ndarray,
                   p: Optional[ModelParams] = None,
                   h: Optional[HullData] = None) -> PrimalSolution:
    """V = v(J) + x J, V_x = J, V_xx = -1/v_yy(J) on every level t < T."""
    p = sol.params if p is None else p
    h = sol.hull if h is None else h
    x_nodes = np.asarray(x_nodes, dtype=float)
    if x_nodes[0] != 0.0 or np.any(np.diff(x_nodes) <= 0.0):
        raise ValueError("x_nodes must start at 0 and increase strictly")
    tab = nodal_derivatives(sol)
    n_lev = sol.grid.n_time
    xp = x_nodes[1:]
    jj = np.repeat(np.arange(n_lev), xp.size)
    xx = np.tile(xp, n_lev)
    ystar, val, d2 = _invert(sol, tab, jj, xx)
    shape = (n_lev, x_nodes.size)
    V = np.empty(shape)
    Vx = np.empty(shape)
    vyy = np.empty(shape)
    V[:, 1:] = (val + xx * ystar).reshape(n_lev, -1)
    Vx[:, 1:] = ystar.reshape(n_lev, -1)
    vyy[:, 1:] = d2.reshape(n_lev, -1)
    y0, v0, vyy0 = _zero_wealth(sol, tab)
    V[:, 0] = v0
    Vx[:, 0] = y0
    vyy[:, 0] = np.where(np.isfinite(vyy0) & (vyy0 > 0.0), vyy0, vyy[:, 1])
    Vxx = -1.0 / vyy
    Vt = _time_slope(sol, tab, Vx)
    H, G = primal_boundaries(sol)
    return PrimalSolution(x_nodes=x_nodes, t=sol.grid.t[:-1], V=V, Vx=Vx, Vxx=Vxx,
                          vyy=vyy, H_curve=H, G_curve=G, f_slope=sol.f_curve[:-1].copy(),
                          params=p, hull=h, Vt=Vt)


def _time_slope(sol: DualSolution, tab: LevelTables, J: np.ndarray) -> np.ndarray:
    """V_t(x, t_j) = v_t(J(x, t_j), t_j) by the envelope theorem.

    v_t is the scheme's backward difference at the dual nodes, interpolated
    linearly in z to J.  In a mixed cell the gap near a moving contact is
    c2 (y - y_b(t))^2, so v_t is taken proportional to y - y_b on the
    continuation side and zero beyond it.
    """
    grid = sol.grid
    vt = (sol.v[1:] - sol.v[:-1]) / grid.dt
    z = np.log(J)
    i = np.clip(np.floor((z - grid.z[0]) / grid.dz).astype(np.int64), 0, grid.n_space - 2)
    s = np.clip((z - grid.z[i]) / grid.dz, 0.0, 1.0)
    rows = np.broadcast_to(np.arange(J.shape[0])[:, None], J.shape)
    out = (1.0 - s) * vt[rows, i] + s * vt[rows, i + 1]
    mixed = tab.kind[rows, i] == MIXED
    if np.any(mixed):
        jm, im, ym = rows[mixed], i[mixed], J[mixed]
        left = tab.cont_left[jm, im]
        ic = np.where(left, im, im + 1)
        yb = tab.y_b[jm, im]
        yc = grid.y[ic]
        frac = np.clip((ym - yb) / (yc - yb), 0.0, None)
        out[mixed] = vt[jm, ic] * frac
    return out


def optimal_portfolio(x: float, t: float, ps: PrimalSolution,
                      p: Optional[ModelParams] = None) -> tuple[np.ndarray, float]:
    """(pi*, exposure) at (x, t): pi* = (sigma sigma')^{-1} mu J v_yy(J).

    Linear interpolation in x on the recovered grid; t is snapped to the
    level at or before it.
    """
    p = ps.params if p is None else p
    if not x > 0.0:
        raise RangeError("optimal portfolio needs x > 0")
    if x > ps.x_nodes[-1]:
        raise RangeError(f"x = {x} beyond the recovered grid")
    if not 0.0 <= t < p.T:
        raise RangeError(f"t = {t} outside [0, T)")
    j = min(int(np.searchsorted(ps.t, t, side="right")) - 1, ps.t.size - 1)
    exposure = float(np.interp(x, ps.x_nodes, ps.pi_scalar[j]))
    return p.merton_direction() * exposure, exposure


@dataclass
class PrimalReport:
    max_residual: float
    max_residual_interior: float
    min_gap: float
    structure_violations: int
    exercise_fraction: float
    vx_positive: bool
    vxx_negative: bool
    vt_max: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def vi_residual(ps: PrimalSolution, p: Optional[ModelParams] = None,
                h: Optional[HullData] = None, time_slope: str = "dual") -> np.ndarray:
    """min(-V_t + (a^2/2) V_x^2 / V_xx - r x V_x + beta V, V - phi) at x > 0.

    V_x and V_xx are the recovered derivatives.  With ``time_slope="dual"``
    V_t is v_t(J) from the dual scheme; ``"forward"`` takes the forward
    difference of V at fixed x between levels (phi closes the last one).
    """
    p = ps.params if p is None else p
    h = ps.hull if h is None else h
    x = ps.x_nodes[1:]
    phi = eval_hull(x, h, p)[0]
    V = ps.V[:, 1:]
    if time_slope == "dual" and ps.Vt is not None:
        Vt = ps.Vt[:, 1:]
    elif time_slope in ("dual", "forward"):
        Vnext = np.vstack([V[1:], phi[None, :]])
        dt = np.diff(np.append(ps.t, p.T))[:, None]
        Vt = (Vnext - V) / dt
    else:
        raise ValueError(f"unknown time_slope '{time_slope}'")
    Vx = ps.Vx[:, 1:]
    Vxx = ps.Vxx[:, 1:]
    op = -Vt + 0.5 * p.a_sq * Vx ** 2 / Vxx - p.r * x * Vx + p.beta * V
    return np.minimum(op, V - phi[None, :])


def verify_primal_vi(ps: PrimalSolution, p: Optional[ModelParams] = None,
                     h: Optional[HullData] = None, tol: float = 1e-10) -> PrimalReport:
    p = ps.params if p is None else p
    h = ps.hull if h is None else h
    res = vi_residual(ps, p, h)
    x = ps.x_nodes
    phi = eval_hull(x, h, p)[0]
    ex = ps.exercise_region(tol)
    violations = 0
    dx = np.diff(x)
    for j in range(ps.t.size):
        G, H = ps.G_curve[j], ps.H_curve[j]
        if math.isnan(G):
            expected = np.zeros(x.size, dtype=bool)
        else:
            expected = (x >= G) & (x <= H)
        bad = np.flatnonzero(expected[1:] != ex[j, 1:]) + 1
        for i in bad:
            # a mismatch is tolerated within one x-cell of either boundary
            near = dx[min(i, dx.size - 1)]
            if not (abs(x[i] - G) <= near or (np.isfinite(H) and abs(x[i] - H) <= near)):
                violations += 1
    Vt = np.diff(np.vstack([ps.V, phi[None, :]]), axis=0)
    interior = res[:-1] if res.shape[0] > 1 else res
    return PrimalReport(
        max_residual=float(np.max(np.abs(res))),
        max_residual_interior=float(np.max(np.abs(interior))),
        min_gap=float(np.min(ps.V - phi[None, :])),
        structure_violations=violations,
        exercise_fraction=float(ex[:, 1:].mean()),
        vx_positive=bool(np.all(ps.Vx > 0.0)),
        vxx_negative=bool(np.all(ps.Vxx < 0.0)),
        vt_max=float(np.max(Vt[:, 1:])),
    )


@dataclass
class RoundTrip:
    """Double-transform check v -> V -> v at probe points.

    ``estimate`` is the single-grid discretization bound |V_xx| dx^2 / 8 of
    the discrete maximization over the x-grid at each probe's maximizer.
    """

    t: np.ndarray
    y: np.ndarray
    error: np.ndarray
    estimate: np.ndarray

    @property
    def max_error(self) -> float:
        return float(np.max(self.error))

    @property
    def max_estimate(self) -> float:
        return float(np.max(self.estimate))

    def as_dict(self) -> dict:
        return {"max_error": self.max_error, "max_estimate": self.max_estimate,
                "n_probes": int(self.error.size)}


PROBE_T = (0.0, 0.25, 0.5, 0.75, 0.9)
PROBE_Y = (0.25, 0.5, 0.75, 0.9, 0.98)


def duality_round_trip(sol: DualSolution, ps: PrimalSolution,
                       t_frac=PROBE_T, y_frac=PROBE_Y) -> RoundTrip:
    """max_x (V(x, t) - x y) over the x-grid against v(y, t).

    Probes sit at fixed fractions of T and of k so that refined runs are
    compared at the same points; v between dual nodes is read from the
    recovery's cell model.
    """
    p, h = sol.params, sol.hull
    grid = sol.grid
    tab = nodal_derivatives(sol)
    x = ps.x_nodes
    dx = np.diff(x)
    ts, ys, errs, ests = [], [], [], []
    for tf in t_frac:
        j = int(round(tf * grid.n_time))
        j = min(j, grid.n_time - 1)
        for yf in y_frac:
            yq = yf * h.k
            z = math.log(yq)
            i = int(np.clip(math.floor((z - grid.z[0]) / grid.dz), 0, grid.n_space - 2))
            s = (z - grid.z[i]) / grid.dz
            _, v_ref, _, _ = _cell_eval(sol, tab, np.array([j]), np.array([i]), np.array([s]))
            vals = ps.V[j] - x * yq
            m = int(np.argmax(vals))
            local = dx[min(m, dx.size - 1)] if m == 0 else max(dx[m - 1], dx[min(m, dx.size - 1)])
            ts.append(grid.t[j])
            ys.append(yq)
            errs.append(abs(vals[m] - float(v_ref[0])))
            ests.append(abs(ps.Vxx[j, m]) * local ** 2 / 8.0)
    return RoundTrip(t=np.array(ts), y=np.array(ys), error=np.array(errs),
                     estimate=np.array(ests))
