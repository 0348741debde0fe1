import math

import numpy as np
import pytest

from dualstop.dual import build_grid, solve_dual
from dualstop.model import compute_hull, eval_hull, eval_payoff
from dualstop.primal import (RangeError, build_x_grid, duality_round_trip, invert_dual_slope,
                             nodal_derivatives, optimal_portfolio, primal_value,
                             recover_primal, verify_primal_vi, vi_residual)

from conftest import REFERENCE_CASES, make_params


def divided_second(x, V):
    h0 = x[1:-1] - x[:-2]
    h1 = x[2:] - x[1:-1]
    return 2.0 * (V[..., 2:] * h0 - V[..., 1:-1] * (h0 + h1) + V[..., :-2] * h1) / (
        h0 * h1 * (h0 + h1))


def divided_first(x, V):
    h0 = x[1:-1] - x[:-2]
    h1 = x[2:] - x[1:-1]
    return (V[..., 2:] * h0 ** 2 - V[..., :-2] * h1 ** 2 + V[..., 1:-1] * (h1 ** 2 - h0 ** 2)) / (
        h0 * h1 * (h0 + h1))


def slope_of_G(y, p):
    """|dG/dy| for G = y^(1/(gamma-1)) - (K - b)."""
    e = 1.0 / (p.gamma - 1.0)
    return abs(e) * y ** (e - 1.0)


# -- inverse of the dual slope ----------------------------------------------

@pytest.mark.parametrize("case", ["I", "II_strict", "IV"])
def test_zero_wealth_maps_to_f(solved, case):
    sol = solved(case).sol
    tab = nodal_derivatives(sol)
    for j in range(0, sol.grid.n_time, 25):
        f = sol.f_curve[j]
        assert abs(invert_dual_slope(0.0, sol, j, tab) - f) <= sol.grid.local_cell(f)


@pytest.mark.parametrize("case", REFERENCE_CASES)
def test_slope_inverse_strictly_decreasing(solved, case):
    ps = solved(case).ps
    assert np.all(np.diff(ps.Vx[:, 1:], axis=1) < 0.0)


def test_slope_inverse_large_wealth_decay(solved):
    s = solved("I")
    ps, p = s.ps, s.params
    x = ps.x_nodes
    J_far = ps.Vx[0, -1]
    J_near = np.interp(x[-1] / 10.0, x, ps.Vx[0])
    # J ~ x^(gamma - 1) as x grows, heading to the bottom of the dual grid
    assert J_far / J_near == pytest.approx(10.0 ** (p.gamma - 1.0), rel=0.02)
    assert J_far < 0.1 * J_near * 10.0 ** (1.0 - p.gamma)


def test_slope_inverse_tends_to_hull_slope_near_T(solved, refined):
    errs = []
    for s in (solved("I"), refined("I")):
        sol, h, p = s.sol, s.hull, s.params
        x = np.array([0.3, 0.6, 1.5]) * h.x_hat
        J = invert_dual_slope(x, sol, sol.grid.n_time - 1)
        errs.append(np.max(np.abs(J - eval_hull(x, h, p)[1])))
    assert errs[1] < errs[0]


def test_slope_inverse_rejects_negative_wealth(solved):
    with pytest.raises(RangeError):
        invert_dual_slope(-1.0, solved("I").sol, 0)


# -- boundaries -------------------------------------------------------------

def test_case_I_primal_boundaries(solved):
    s = solved("I")
    ps, h, p = s.ps, s.hull, s.params
    assert np.all(np.isinf(ps.H_curve))
    cell = s.sol.grid.local_cell(h.k)
    assert abs(ps.G_curve[-1] - h.x_hat) <= 2.0 * cell * slope_of_G(h.k, p)
    assert np.all(ps.G_curve >= h.x_hat)


def test_case_II_strict_primal_boundary_limit(solved):
    s = solved("II_strict")
    ps, p = s.ps, s.params
    yT = s.sol.case_label.y_T
    target = yT ** (1.0 / (p.gamma - 1.0)) - (p.K - p.b)
    cell = s.sol.grid.local_cell(yT)
    assert abs(ps.G_curve[-1] - target) <= 2.0 * cell * slope_of_G(yT, p)


@pytest.mark.parametrize("case", REFERENCE_CASES)
def test_primal_boundaries_monotone(solved, case):
    ps = solved(case).ps
    x = ps.x_nodes
    for curve, sign in ((ps.G_curve, -1.0), (ps.H_curve, 1.0)):
        c = curve[np.isfinite(curve)]
        if c.size < 2:
            continue
        steps = sign * np.diff(c)
        cells = np.diff(x)[np.clip(np.searchsorted(x, c[1:]) - 1, 0, x.size - 2)]
        assert np.all(steps >= -cells)


@pytest.mark.parametrize("case", REFERENCE_CASES)
def test_zero_wealth_slope_is_f(solved, case):
    s = solved(case)
    ps, grid = s.ps, s.sol.grid
    cells = np.array([grid.local_cell(f) for f in ps.f_slope])
    assert np.all(np.abs(ps.Vx[:, 0] - ps.f_slope) <= cells)


# -- shape of the recovered value -------------------------------------------

@pytest.mark.parametrize("case", REFERENCE_CASES)
def test_value_dominates_hull(solved, case):
    s = solved(case)
    ps = s.ps
    phi = eval_hull(ps.x_nodes, s.hull, s.params)[0]
    assert np.min(ps.V - phi[None, :]) >= -1e-12


@pytest.mark.parametrize("case", REFERENCE_CASES)
def test_value_strictly_concave(solved, case):
    ps = solved(case).ps
    assert np.all(divided_second(ps.x_nodes, ps.V) < 0.0)


@pytest.mark.parametrize("case", REFERENCE_CASES)
def test_exercise_set_matches_boundaries(solved, case):
    rep = verify_primal_vi(solved(case).ps)
    assert rep.structure_violations == 0
    assert rep.vx_positive and rep.vxx_negative


def test_value_at_zero_wealth(solved):
    for case in ("I", "IV"):
        s = solved(case)
        assert np.max(np.abs(s.ps.V[:, 0] - s.params.floor_utility)) <= 1e-4


def test_deep_exercise_matches_hull_and_operator_nonnegative(solved):
    s = solved("I")
    ps, p, h = s.ps, s.params, s.hull
    x = ps.x_nodes
    phi = eval_hull(x, h, p)[0]
    deep = x[None, :] >= 1.05 * ps.G_curve[:, None]
    assert deep.any()
    assert np.max(np.abs(ps.V - phi[None, :])[deep]) <= 1e-10
    L = -ps.Vt + 0.5 * p.a_sq * ps.Vx ** 2 / ps.Vxx - p.r * x * ps.Vx + p.beta * ps.V
    assert np.min(L[deep]) >= 0.0


def test_case_IV_never_exercises(solved):
    s = solved("IV")
    ps = s.ps
    phi = eval_hull(ps.x_nodes, s.hull, s.params)[0]
    assert np.all(np.isnan(ps.G_curve))
    assert np.all(ps.V[:, 1:] > phi[None, 1:])
    res = np.abs(vi_residual(ps))
    assert np.median(res) <= 1e-3


def test_terminal_layer_tends_to_hull_not_payoff(solved):
    s = solved("I")
    ps, h, p = s.ps, s.hull, s.params
    x = np.array([0.5, 1.0, 1.5]) * p.b
    phi = eval_hull(x, h, p)[0]
    g = eval_payoff(x, p)
    assert np.all(phi - g > 0.1)
    V = primal_value(s.sol, s.sol.grid.n_time - 1, x)[0]
    assert np.all(np.abs(V - phi) <= 0.02 * phi)
    assert np.all(V - g >= 0.08)


def test_primal_value_matches_recovered_nodes(solved):
    s = solved("I")
    ps = s.ps
    for j in (0, 200, 399):
        V, Vx, Vxx = primal_value(s.sol, j, ps.x_nodes[1:])
        assert np.allclose(V, ps.V[j, 1:], rtol=0, atol=1e-12)
        assert np.allclose(Vx, ps.Vx[j, 1:], rtol=0, atol=1e-12)


# -- duality round trip -----------------------------------------------------

def test_round_trip_brute_force_coarse():
    p = make_params(beta=0.02)
    h = compute_hull(p)
    grid = build_grid(p, h, 50, 50)
    sol = solve_dual(p, h, grid)
    worst = []
    for n_x in (200, 400):
        x = build_x_grid(h, n_x, p)
        ps = recover_primal(sol, x)
        dx = np.diff(x)
        errs = []
        for j in (0, 25, 45):
            # dual nodes below k whose maximizing wealth lies on the x-grid
            for i in np.flatnonzero((grid.y > 2.0 * ps.Vx[j, -1]) & (grid.y < h.k)):
                vals = ps.V[j] - x * grid.y[i]
                m = int(np.argmax(vals))
                est = abs(ps.Vxx[j, m]) * max(dx[m - 1], dx[m]) ** 2 / 8.0
                err = abs(vals[m] - sol.v[j, i])
                assert err <= 5.0 * est + 1e-12
                errs.append(err)
        worst.append(max(errs))
    assert worst[1] < 0.5 * worst[0]


@pytest.mark.parametrize("case", ["I", "IV"])
def test_round_trip_within_estimate_and_converges(solved, refined, case):
    a = duality_round_trip(solved(case).sol, solved(case).ps)
    b = duality_round_trip(refined(case).sol, refined(case).ps)
    assert a.max_error <= 5.0 * a.max_estimate
    assert b.max_error < a.max_error


# -- optimal portfolio ------------------------------------------------------

def test_portfolio_formula_and_sign(solved):
    s = solved("I")
    ps, p = s.ps, s.params
    j, i = 100, 150
    x = ps.x_nodes[i]
    pi, exposure = optimal_portfolio(x, ps.t[j], ps)
    expected = p.mu[0] / p.sigma[0, 0] ** 2 * ps.Vx[j, i] * ps.vyy[j, i]
    assert pi[0] == pytest.approx(expected, rel=1e-12)
    assert exposure > 0.0
    assert np.all(ps.pi_scalar[:, 1:] > 0.0)


def test_portfolio_direction_linear_in_mu():
    a = make_params()
    b = make_params(mu=0.12)
    assert np.allclose(b.merton_direction(), 2.0 * a.merton_direction(), rtol=1e-15)


def test_portfolio_rejects_bad_arguments(solved):
    ps = solved("I").ps
    with pytest.raises(RangeError):
        optimal_portfolio(0.0, 0.0, ps)
    with pytest.raises(RangeError):
        optimal_portfolio(1.0, ps.params.T, ps)


@pytest.mark.parametrize("case", ["I", "IV"])
def test_exposure_matches_finite_differences(solved, refined, case):
    worst = []
    for s in (solved(case), refined(case)):
        ps, h = s.ps, s.hull
        x = ps.x_nodes
        half = ps.t.size // 2
        V = ps.V[:half]
        fd = -divided_first(x, V) / divided_second(x, V)
        G = np.nan_to_num(ps.G_curve[:half], nan=np.inf)
        xm = x[1:-1]
        sel = (xm[None, :] > 0.05 * h.x_hat) & (xm[None, :] < np.minimum(0.9 * G[:, None],
                                                                       10.0 * h.x_hat))
        worst.append(np.max(np.abs(fd / ps.pi_scalar[:half, 1:-1] - 1.0)[sel]))
    assert worst[0] <= 0.3
    assert worst[1] <= 0.6 * worst[0]


def test_recover_requires_zero_first_node(solved):
    sol = solved("I").sol
    with pytest.raises(ValueError):
        recover_primal(sol, np.array([0.1, 0.2, 0.3]))
