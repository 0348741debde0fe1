"""Monte Carlo validation of the solver: wealth simulation under feedback
policies, the state-price martingale check and the bang-bang terminal limit.

Paths are generated in fixed-size blocks; block b draws from a Philox
stream keyed on (seed, tag, b), so results do not depend on how blocks are
scheduled.  Wealth uses the exponential Euler step

    X <- e^{r dt} X + mu'pi dt + pi' sigma dW

with pi frozen over the step; it is exact for pi = 0 and keeps zeta X a
martingale from step to step.  Within a step the wealth is an arithmetic
Brownian motion, so a path that touches 0 between grid times is detected
with the Brownian-bridge crossing probability and absorbed there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import HullData, ModelParams, eval_hull, eval_payoff
from .primal import PrimalSolution

BLOCK = 4096
TAG_VALUE, TAG_MARTINGALE, TAG_BANG = 1, 2, 3


class NumericalBlowup(RuntimeError):
    """A simulated path left the plausible wealth range."""


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    dt_sim: float = 0.01
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 1000:
            raise ValueError(f"n_paths must be at least 1000, got {self.n_paths}")
        if not self.dt_sim > 0.0:
            raise ValueError("dt_sim must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even n_paths")

    def check_horizon(self, T: float):
        if self.dt_sim > T / 100.0 * (1.0 + 1e-12):
            raise ValueError(f"dt_sim must not exceed T/100 = {T / 100.0}")


@dataclass
class McReport:
    estimate: float
    std_error: float
    n_paths: int
    n_stopped_early: int = 0
    reference: Optional[float] = None
    verdict: Optional[bool] = None
    extra: dict = field(default_factory=dict)

    @property
    def ci95(self) -> tuple[float, float]:
        half = 1.959963984540054 * self.std_error
        return self.estimate - half, self.estimate + half

    def as_dict(self) -> dict:
        out = {"estimate": self.estimate, "std_error": self.std_error,
               "ci95": list(self.ci95), "n_paths": self.n_paths,
               "n_stopped_early": self.n_stopped_early,
               "reference": self.reference, "verdict": self.verdict}
        out.update(self.extra)
        return out


def block_rng(seed: int, tag: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, (tag << 32) | block]))


def _blocks(n_paths: int):
    start = 0
    b = 0
    while start < n_paths:
        m = min(BLOCK, n_paths - start)
        yield b, m
        start += m
        b += 1


# -- policies ---------------------------------------------------------------

class Policy:
    """Feedback control: portfolio vectors and a stopping test at (x, t)."""

    def pi(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def stop(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.zeros(x.shape, dtype=bool)


class ZeroPolicy(Policy):
    """All wealth in the bond; stop at once or hold to T."""

    def __init__(self, n_assets: int, stop_now: bool = False):
        self.n = n_assets
        self.stop_now = stop_now

    def pi(self, x, t):
        return np.zeros((x.size, self.n))

    def stop(self, x, t):
        return np.full(x.shape, self.stop_now)


class ConstantProportion(Policy):
    """pi = c x (sigma sigma')^{-1} mu, held to T."""

    def __init__(self, p: ModelParams, c: float = 1.0):
        self.direction = c * p.merton_direction()

    def pi(self, x, t):
        return x[:, None] * self.direction[None, :]


class SolverPolicy(Policy):
    """Recovered feedback portfolio with the per-level stopping interval.

    The exposure is interpolated linearly in x on the level at or before t;
    beyond the x-grid it grows proportionally to x.  |pi| is capped at
    ``cap`` x.  The stopping interval [G(t), H(t)] is interpolated linearly
    in t between levels.
    """

    def __init__(self, ps: PrimalSolution, p: ModelParams, cap: float = 50.0):
        self.ps = ps
        self.direction = p.merton_direction()
        self.norm = float(np.linalg.norm(self.direction))
        self.cap = cap
        self.T = p.T
        self.n_capped = 0
        self.n_calls = 0
        self._t = np.append(ps.t, p.T)
        self._G = np.append(ps.G_curve, ps.G_curve[-1])
        self._H = np.append(ps.H_curve, ps.H_curve[-1])

    def _level(self, t):
        return min(int(np.searchsorted(self.ps.t, t, side="right")) - 1, self.ps.t.size - 1)

    def pi(self, x, t):
        ps = self.ps
        j = max(self._level(t), 0)
        xs = ps.x_nodes
        e = np.interp(x, xs, ps.pi_scalar[j])
        far = x > xs[-1]
        if np.any(far):
            e[far] = ps.pi_scalar[j, -1] / xs[-1] * x[far]
        limit = self.cap * x / self.norm
        capped = e > limit
        self.n_capped += int(capped.sum())
        self.n_calls += x.size
        e = np.where(capped, limit, e)
        return e[:, None] * self.direction[None, :]

    def stop(self, x, t):
        G = _interp_edge(t, self._t, self._G)
        H = _interp_edge(t, self._t, self._H)
        if math.isnan(G):
            return np.zeros(x.shape, dtype=bool)
        return (x >= G) & (x <= H)


def _interp_edge(t, ts, vals):
    """Linear interpolation in t that keeps NaN (absent) and +inf exact."""
    j = int(np.searchsorted(ts, t, side="right")) - 1
    j = min(max(j, 0), ts.size - 2)
    a, b = vals[j], vals[j + 1]
    if math.isnan(a) or math.isnan(b):
        return a if t - ts[j] < ts[j + 1] - t else b
    if math.isinf(a) or math.isinf(b):
        return math.inf if (math.isinf(a) and math.isinf(b)) or t - ts[j] < ts[j + 1] - t \
            else (b if math.isinf(a) else a)
    w = (t - ts[j]) / (ts[j + 1] - ts[j])
    return (1.0 - w) * a + w * b


# -- simulation -------------------------------------------------------------

def _normals(rng, m, n, antithetic):
    if not antithetic:
        return rng.standard_normal((m, n))
    half = rng.standard_normal((m // 2, n))
    return np.concatenate([half, -half])


def _reduce(payoff: np.ndarray, antithetic: bool) -> tuple[float, float]:
    if np.all(payoff == payoff[0]):
        return float(payoff[0]), 0.0
    if antithetic:
        # pair i with i + m/2 inside each block
        pairs = []
        start = 0
        for _, m in _blocks(payoff.size):
            blk = payoff[start:start + m]
            pairs.append(0.5 * (blk[:m // 2] + blk[m // 2:]))
            start += m
        pm = np.concatenate(pairs)
        return float(np.mean(payoff)), float(np.std(pm, ddof=1) / math.sqrt(pm.size))
    return float(np.mean(payoff)), float(np.std(payoff, ddof=1) / math.sqrt(payoff.size))


def _time_grid(T: float, dt_sim: float):
    n_steps = max(int(math.ceil(T / dt_sim - 1e-9)), 1)
    return n_steps, T / n_steps


def _run_block(x0, policy, p, n_steps, dt, rng, m, antithetic, want_zeta=False):
    n = p.n_assets
    sq = math.sqrt(dt)
    growth = math.exp(p.r * dt)
    x = np.full(m, float(x0))
    tau = np.full(m, p.T)
    alive = ~policy.stop(x, 0.0)
    tau[~alive] = 0.0
    theta = p.market_price_of_risk()
    w_theta = np.zeros(m)
    for step in range(n_steps):
        dW = _normals(rng, m, n, antithetic) * sq
        if want_zeta:
            w_theta += dW @ theta
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            continue
        t = step * dt
        xa = x[idx]
        pi = policy.pi(xa, t)
        sp = pi @ p.sigma
        x_new = growth * xa + (pi @ p.mu) * dt + np.einsum("ij,ij->i", sp, dW[idx])
        # the path may touch 0 inside the step: Brownian bridge crossing test
        var = np.einsum("ij,ij->i", sp, sp) * dt
        u = rng.random(m)[idx]
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            p_hit = np.where((var > 0.0) & (x_new > 0.0),
                             np.exp(-2.0 * xa * x_new / np.where(var > 0.0, var, 1.0)), 0.0)
        hit = (x_new <= 0.0) | (u < p_hit)
        xa = np.where(hit, 0.0, x_new)
        if np.any(xa > 1e6 * x0):
            raise NumericalBlowup(f"wealth exceeded 1e6 x0 at t = {t + dt:.6g}")
        t_next = (step + 1) * dt
        x[idx] = xa
        done = hit.copy()
        if step + 1 < n_steps:
            done |= policy.stop(xa, t_next)
        tau[idx[done]] = t_next
        alive[idx[done]] = False
    return x, tau, w_theta


def simulate_value(x0: float, policy: Policy, p: ModelParams, cfg: SimConfig,
                   reference: Optional[float] = None) -> McReport:
    """Estimate E[exp(-beta tau) g(X_tau)] under ``policy`` from X_0 = x0."""
    if not x0 > 0.0:
        raise ValueError("x0 must be positive")
    cfg.check_horizon(p.T)
    n_steps, dt = _time_grid(p.T, cfg.dt_sim)
    pay, early = [], 0
    for b, m in _blocks(cfg.n_paths):
        rng = block_rng(cfg.seed, TAG_VALUE, b)
        x, tau, _ = _run_block(x0, policy, p, n_steps, dt, rng, m, cfg.antithetic)
        pay.append(np.exp(-p.beta * tau) * eval_payoff(x, p))
        early += int(np.sum(tau < p.T))
    payoff = np.concatenate(pay)
    est, se = _reduce(payoff, cfg.antithetic)
    rep = McReport(estimate=est, std_error=se, n_paths=payoff.size,
                   n_stopped_early=early, reference=reference)
    if reference is not None:
        rep.verdict = abs(est - reference) <= 3.0 * se
    if isinstance(policy, SolverPolicy):
        rep.extra["pi_cap"] = policy.cap
        rep.extra["capped_fraction"] = policy.n_capped / max(policy.n_calls, 1)
    return rep


def martingale_check(x0: float, policy: Policy, p: ModelParams,
                     cfg: SimConfig) -> McReport:
    """mean(zeta_T X_T) against x0, zeta_t = exp(-(r + a^2/2) t - theta'W_t)."""
    cfg.check_horizon(p.T)
    n_steps, dt = _time_grid(p.T, cfg.dt_sim)
    out = []
    for b, m in _blocks(cfg.n_paths):
        rng = block_rng(cfg.seed, TAG_MARTINGALE, b)
        x, _, w_theta = _run_block(x0, _NoStop(policy), p, n_steps, dt, rng, m,
                                   cfg.antithetic, want_zeta=True)
        zeta = np.exp(-(p.r + 0.5 * p.a_sq) * p.T - w_theta)
        out.append(zeta * x)
    vals = np.concatenate(out)
    est, se = _reduce(vals, cfg.antithetic)
    # a rounding floor keeps zero-variance cases decidable
    return McReport(estimate=est, std_error=se, n_paths=vals.size, reference=x0,
                    verdict=abs(est - x0) <= 3.0 * se + 1e-12 * abs(x0))


class _NoStop(Policy):
    def __init__(self, inner: Policy):
        self.inner = inner

    def pi(self, x, t):
        return self.inner.pi(x, t)


def bang_bang_limit(x0: float, N_list: Sequence[float], p: ModelParams, h: HullData,
                    cfg: SimConfig, horizon: float = 0.1) -> list[McReport]:
    """E[g(X_T)] for dX = N 1{0 < X < x_hat} dW over ``horizon``, per N.

    Paths are absorbed (clamped) at 0 and x_hat.  The step is refined to
    (x_hat / (10 N))^2 so a single step cannot jump across the interval.
    """
    if not 0.0 < x0 < h.x_hat:
        raise ValueError("x0 must lie strictly between 0 and x_hat")
    reports = []
    target = float(eval_hull(x0, h, p)[0])
    for N in N_list:
        dt_cap = (h.x_hat / (10.0 * N)) ** 2
        n_steps, dt = _time_grid(horizon, min(cfg.dt_sim, dt_cap))
        sq = N * math.sqrt(dt)
        finals = []
        for b, m in _blocks(cfg.n_paths):
            rng = block_rng(cfg.seed, TAG_BANG, b * 1024 + int(N) % 1024)
            x = np.full(m, float(x0))
            live = np.arange(m)
            for _ in range(n_steps):
                if live.size == 0:
                    break
                xl = x[live] + sq * rng.standard_normal(live.size)
                np.clip(xl, 0.0, h.x_hat, out=xl)
                x[live] = xl
                live = live[(xl > 0.0) & (xl < h.x_hat)]
            finals.append(x)
        xT = np.concatenate(finals)
        est, se = _reduce(eval_payoff(xT, p), False)
        reports.append(McReport(
            estimate=est, std_error=se, n_paths=xT.size, reference=target,
            extra={"N": N, "p_top": float(np.mean(xT >= h.x_hat)),
                   "p_zero": float(np.mean(xT <= 0.0)), "p_top_limit": x0 / h.x_hat,
                   "n_steps": n_steps}))
    return reports
