"""Complete-market tools: pricing-kernel simulation, the closed-form ratchet plan,
the three-regime drawdown formula and the q-floor price map.

Monte Carlo paths are generated one at a time, each from its own seeded
stream, so path i is the same under any path count and every
calculation on a given seed uses common random numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np
from numba import njit
from scipy.optimize import brentq

from .esssup import running_esssup_interior
from .grid import Clock, PathPanel, TimeGrid, pairing
from .primal import InfeasibleError, solve_primal_tree
from .tree import TreeModel, alpha
from .utility import Utility


# ----------------------------------------------------------------------
# Kernel parameters
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class KernelSpec:
    """log Z is Levy: drift + theta * Brownian motion + compound Poisson jumps.

    Jump sizes of log Z are normal(jump_mean, jump_std) or, for
    jump_dist="exponential", jump_sign * Exp(mean=jump_mean). The drift
    is set so that Z is a martingale.
    """

    theta: float = 0.0
    r: float = 0.05
    delta_pref: float = 0.1
    dt: float = 1.0 / 252
    t_max: Optional[float] = None
    seed: int = 0
    jump_intensity: float = 0.0
    jump_dist: str = "normal"
    jump_mean: float = 0.0
    jump_std: float = 0.0
    jump_sign: float = -1.0
    trunc_tol: float = 1e-4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.jump_intensity < 0:
            raise ValueError("jump intensity must be non-negative")
        if self.jump_dist not in ("normal", "exponential"):
            raise ValueError("jump_dist must be 'normal' or 'exponential'")
        if self.jump_dist == "exponential" and self.jump_intensity > 0:
            if self.jump_mean <= 0:
                raise ValueError("exponential jumps need a positive mean")
            if self.jump_sign * self.jump_mean >= 1:
                raise ValueError("upward exponential log-jumps need mean < 1 for a finite compensator")
        if self.t_max is not None and not (0 < self.t_max < math.inf):
            raise ValueError("t_max must be finite and positive")
        if not 0 < self.trunc_tol < 1:
            raise ValueError("trunc_tol must lie in (0, 1)")

    @property
    def kind(self) -> str:
        return "levy" if self.jump_intensity > 0 else "brownian"

    def jump_mgf(self) -> float:
        """E[exp(J)] for one log-jump."""
        if self.jump_dist == "normal":
            return math.exp(self.jump_mean + 0.5 * self.jump_std ** 2)
        return 1.0 / (1.0 - self.jump_sign * self.jump_mean)

    @property
    def drift(self) -> float:
        comp = self.jump_intensity * (self.jump_mgf() - 1.0) if self.jump_intensity > 0 else 0.0
        return -0.5 * self.theta ** 2 - comp

    def _params(self):
        return (self.dt, self.drift, self.theta, self.jump_intensity,
                0 if self.jump_dist == "normal" else 1, self.jump_mean, self.jump_std, self.jump_sign)


def _rng(seed: int, i: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))


@njit(cache=True)
def _draw_logz(rng, out, n, dt, drift, sigma, lam_j, jkind, jmu, jsd, jsign):
    sq = math.sqrt(dt)
    x = 0.0
    out[0] = 0.0
    for k in range(n):
        x += drift * dt
        if sigma != 0.0:
            x -= sigma * sq * rng.standard_normal()
        if lam_j > 0.0:
            m = rng.poisson(lam_j * dt)
            if m > 0:
                if jkind == 0:
                    x += m * jmu + math.sqrt(m) * jsd * rng.standard_normal()
                else:
                    x += jsign * rng.gamma(m, jmu)
        out[k + 1] = x


@njit(cache=True)
def _path_summary(rng, n, dt, drift, sigma, lam_j, jkind, jmu, jsd, jsign,
                  growth, dwt, ewt, disc, span, inv_gamma, check_env, logz, V, M, R, stack):
    """One path: I contribution, budget base, envelope residuals, monotonicity count.

    disc[k] = exp(-delta t_k) and span[m] = (1 - exp(-delta m dt)) / delta, so
    disc[k] * span[j - k] is the exact discount mass of cells k..j-1.
    """
    _draw_logz(rng, logz, n, dt, drift, sigma, lam_j, jkind, jmu, jsd, jsign)
    # separate pass so the exponentials vectorize
    for k in range(n):
        V[k] = math.exp(logz[k])
    run = math.inf
    rpow = 0.0
    I = 0.0
    B = 0.0
    mono = 0
    for k in range(n):
        z = V[k]
        v = z * growth[k]
        V[k] = v
        if v < run:
            run = v
            rpow = run ** (-inv_gamma)
        if k > 0 and run > M[k - 1]:
            mono += 1
        M[k] = run
        I += dwt[k] * run
        B += ewt[k] * z * rpow
    ineq = -math.inf
    eq = 0.0
    n_inc = 0
    if check_env:
        top = 0
        lhs = 0.0
        for k in range(n - 1, -1, -1):
            lhs += dwt[k] * M[k]
            vk = V[k]
            while top > 0 and V[stack[top - 1]] >= vk:
                top -= 1
            if top > 0:
                j = stack[top - 1]
                rk = vk * disc[k] * span[j - k] + R[j]
            else:
                rk = vk * disc[k] * span[n - k]
            R[k] = rk
            stack[top] = k
            top += 1
            rel = (lhs - rk) / rk
            if rel > ineq:
                ineq = rel
            if k == 0 or vk < M[k - 1]:
                n_inc += 1
                if abs(rel) > eq:
                    eq = abs(rel)
    return I, B, ineq, eq, n_inc, mono


@njit(cache=True)
def _floor_budget(rng, n, dt, drift, sigma, lam_j, jkind, jmu, jsd, jsign,
                  growth, ewt, K, q, inv_gamma, logz):
    _draw_logz(rng, logz, n, dt, drift, sigma, lam_j, jkind, jmu, jsd, jsign)
    run = math.inf
    c = 0.0
    B = 0.0
    for k in range(n):
        z = math.exp(logz[k])
        v = z * growth[k]
        if v < run:
            run = v
            c = max((K * run) ** (-inv_gamma), q)
        B += ewt[k] * z * c
    return B


def _horizon_cells(spec: KernelSpec, t_max: float) -> int:
    return int(math.ceil(t_max / spec.dt - 1e-9))


def _weights(spec: KernelSpec, n: int):
    t = np.arange(n) * spec.dt
    growth = np.exp((spec.delta_pref - spec.r) * t)
    dwt = np.exp(-spec.delta_pref * t) * (-np.expm1(-spec.delta_pref * spec.dt)) / spec.delta_pref
    if spec.r > 0:
        ewt = np.exp(-spec.r * t) * (-np.expm1(-spec.r * spec.dt)) / spec.r
    else:
        ewt = np.full(n, spec.dt)
    return growth, dwt, ewt


# ----------------------------------------------------------------------
# Simulation
# ----------------------------------------------------------------------
def simulate_kernel(spec: KernelSpec, n_paths: int, horizon: Optional[float] = None) -> PathPanel:
    """Panel of Z on the cells of [0, horizon) (Z at each cell's left edge)."""
    T = horizon if horizon is not None else spec.t_max
    if T is None:
        raise ValueError("simulate_kernel needs a finite horizon")
    n = _horizon_cells(spec, T)
    if n_paths * n > 50_000_000:
        raise MemoryError("panel too large; use kernel_at for checkpoint statistics")
    out = np.empty((n_paths, n))
    buf = np.empty(n + 1)
    p = spec._params()
    for i in range(n_paths):
        _draw_logz(_rng(spec.seed, i), buf, n, *p)
        out[i] = np.exp(buf[:n])
    grid = TimeGrid.uniform(n, spec.dt, truncated=True)
    clock = Clock.exponential(grid, spec.r) if spec.r > 0 else Clock.lebesgue(grid)
    return PathPanel(out, grid, clock)


def kernel_at(spec: KernelSpec, n_paths: int, times) -> np.ndarray:
    """Z at the given times for each path, shape (n_paths, len(times))."""
    idx = np.rint(np.asarray(times, dtype=float) / spec.dt).astype(np.int64)
    n = int(idx.max())
    buf = np.empty(n + 1)
    out = np.empty((n_paths, idx.size))
    p = spec._params()
    for i in range(n_paths):
        _draw_logz(_rng(spec.seed, i), buf, n, *p)
        out[i] = np.exp(buf[idx])
    return out


def martingale_check(spec: KernelSpec, n_paths: int, times=(1.0, 5.0), n_se: float = 3.0) -> dict:
    Z = kernel_at(spec, n_paths, times)
    mean = Z.mean(axis=0)
    se = Z.std(axis=0, ddof=1) / math.sqrt(n_paths)
    ok = np.abs(mean - 1.0) <= n_se * np.maximum(se, 1e-300)
    ok |= (se == 0) & (np.abs(mean - 1.0) <= 1e-12)
    return {"times": list(times), "mean": mean.tolist(), "se": se.tolist(), "ok": bool(ok.all())}


@dataclass(frozen=True)
class _Summaries:
    I: np.ndarray
    B: np.ndarray
    ineq: np.ndarray
    eq: np.ndarray
    n_inc: np.ndarray
    mono: np.ndarray
    n_cells: int
    t_max: float


def _run(spec: KernelSpec, n_paths: int, gamma: float, t_max: float, check_env: bool = True) -> _Summaries:
    n = _horizon_cells(spec, t_max)
    growth, dwt, ewt = _weights(spec, n)
    d = spec.delta_pref
    disc = np.exp(-d * spec.dt * np.arange(n))
    span = -np.expm1(-d * spec.dt * np.arange(n + 1)) / d
    logz = np.empty(n + 1)
    V, M, R = np.empty(n), np.empty(n), np.empty(n)
    stack = np.empty(n, dtype=np.int64)
    cols = [np.empty(n_paths) for _ in range(4)] + [np.empty(n_paths, np.int64) for _ in range(2)]
    p = spec._params()
    for i in range(n_paths):
        res = _path_summary(_rng(spec.seed, i), n, *p, growth, dwt, ewt, disc, span,
                            1.0 / gamma, check_env, logz, V, M, R, stack)
        for col, val in zip(cols, res):
            col[i] = val
    return _Summaries(*cols, n_cells=n, t_max=n * spec.dt)


def truncation_horizon(spec: KernelSpec, I_estimate: float) -> float:
    """Smallest T with exp(-delta T)/delta <= trunc_tol * I."""
    d = spec.delta_pref
    return max(math.log(1.0 / (spec.trunc_tol * d * I_estimate)) / d, spec.dt)


@lru_cache(maxsize=8)
def _summaries(spec: KernelSpec, n_paths: int, gamma: float) -> _Summaries:
    if spec.delta_pref <= 0:
        raise ValueError("delta_pref must be positive")
    t_max = spec.t_max
    if t_max is None:
        # pilot run on the bound I <= 1/delta, then the policy horizon
        pilot_T = truncation_horizon(spec, 1.0 / spec.delta_pref)
        pilot = _run(spec, min(n_paths, 2000), gamma, pilot_T, False)
        t_max = truncation_horizon(spec, float(pilot.I.mean()))
    return _run(spec, n_paths, gamma, t_max)


def _mean_se(a: np.ndarray) -> Tuple[float, float]:
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se


def estimate_I(spec: KernelSpec, n_paths: int) -> Tuple[float, float, dict]:
    """Monte Carlo I with standard error and truncation diagnostics."""
    s = _summaries(spec, n_paths, 1.0)
    I, se = _mean_se(s.I)
    bound = math.exp(-spec.delta_pref * s.t_max) / spec.delta_pref
    return I, se, {"t_max": s.t_max, "n_cells": s.n_cells, "truncation_bound": bound}


def I_quadrature(spec: KernelSpec, horizon: float) -> float:
    """I for a deterministic kernel (theta = 0, no jumps) by exact cell sums."""
    if spec.theta != 0 or spec.jump_intensity > 0:
        raise ValueError("quadrature route only covers deterministic kernels")
    n = _horizon_cells(spec, horizon)
    growth, dwt, _ = _weights(spec, n)
    return float(np.sum(dwt * np.minimum.accumulate(growth)))


# ----------------------------------------------------------------------
# Closed-form ratchet plan
# ----------------------------------------------------------------------
@dataclass
class RiedelPlan:
    K: float
    y: float
    I: float
    I_se: float
    budget: float
    budget_se: float
    t_max: float
    n_cells: int
    truncation_bound: float
    envelope_inequality: float
    envelope_equality: float
    increase_cells: int
    monotone_violations: int
    clamped: int
    n_paths: int
    stored: dict = field(default_factory=dict)

    def summary(self) -> dict:
        keys = ["K", "y", "I", "I_se", "budget", "budget_se", "t_max", "n_cells", "truncation_bound",
                "envelope_inequality", "envelope_equality", "increase_cells", "monotone_violations",
                "clamped", "n_paths"]
        return {k: getattr(self, k) for k in keys}

    def panel(self) -> PathPanel:
        """Stored paths of the plan as a panel on the simulation grid."""
        c = self.stored["c"]
        grid = TimeGrid.uniform(c.shape[1], self.t_max / self.n_cells, truncated=True)
        r = self.stored["r"]
        clock = Clock.exponential(grid, r) if r > 0 else Clock.lebesgue(grid)
        return PathPanel(c, grid, clock)


def _stored_paths(spec: KernelSpec, utility: Utility, K: float, n: int, count: int) -> dict:
    buf = np.empty(n + 1)
    growth, _, _ = _weights(spec, n)
    Z = np.empty((count, n))
    for i in range(count):
        _draw_logz(_rng(spec.seed, i), buf, n, *spec._params())
        Z[i] = np.exp(buf[:n])
    run = np.minimum.accumulate(Z * growth, axis=1)
    c = utility.inv(K * run)
    return {"t": np.arange(n) * spec.dt, "Z": Z, "running_inf": run, "c": c, "r": spec.r}


def riedel_plan(spec: KernelSpec, utility: Utility, y: float, n_paths: int, store: int = 8) -> RiedelPlan:
    """c_t = i(inf_{s<t} K Z_s e^{(delta-r)s}) with K = y / (I r).

    On the cell grid the infimum for cell k runs over cells 0..k, the
    exact left-open infimum for a kernel held constant on each cell.
    """
    if spec.r <= 0:
        raise ValueError("the closed form needs a positive interest rate")
    if y <= 0:
        raise ValueError("y must be positive")
    s = _summaries(spec, n_paths, utility.gamma)
    I, I_se = _mean_se(s.I)
    K = y / (I * spec.r)
    scale = K ** (-1.0 / utility.gamma)
    budget, bse = _mean_se(scale * s.B)
    clamped = int(K < 1e-300 or K > 1e300)
    stored = _stored_paths(spec, utility, K, s.n_cells, min(store, n_paths)) if store else {}
    return RiedelPlan(
        K=K, y=y, I=I, I_se=I_se, budget=budget, budget_se=bse, t_max=s.t_max, n_cells=s.n_cells,
        truncation_bound=math.exp(-spec.delta_pref * s.t_max) / spec.delta_pref,
        envelope_inequality=float(s.ineq.max()), envelope_equality=float(s.eq.max()),
        increase_cells=int(s.n_inc.sum()), monotone_violations=int(s.mono.sum()),
        clamped=clamped, n_paths=n_paths, stored=stored)


def budget_match_riedel(spec: KernelSpec, utility: Utility, x: float, n_paths: int, store: int = 8) -> RiedelPlan:
    """Bisection in log y on the sampled budget; all steps share the same paths."""
    if x <= 0:
        raise ValueError("x must be positive")
    s = _summaries(spec, n_paths, utility.gamma)
    I = float(s.I.mean())
    Bbar = float(s.B.mean())

    def budget(y):
        return (y / (I * spec.r)) ** (-1.0 / utility.gamma) * Bbar

    lo, hi = 1.0, 1.0
    for _ in range(400):
        if budget(lo) >= x:
            break
        lo *= 0.5
    for _ in range(400):
        if budget(hi) <= x:
            break
        hi *= 2.0
    if not budget(lo) >= x >= budget(hi):
        raise RuntimeError(f"could not bracket the budget x={x} (lo={lo}, hi={hi})")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if budget(mid) >= x:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    y = lo if abs(budget(lo) - x) <= abs(budget(hi) - x) else hi
    plan = riedel_plan(spec, utility, y, n_paths, store=store)
    tol = max(1e-3 * x, 2.0 * plan.budget_se)
    if abs(plan.budget - x) > tol:
        raise RuntimeError(f"budget mismatch {plan.budget} vs {x}")
    return plan


def riedel_floor_price(spec: KernelSpec, utility: Utility, y: float, q: float, n_paths: int) -> Tuple[float, float]:
    """Price of the ratchet plan floored at q (common random numbers)."""
    s = _summaries(spec, n_paths, utility.gamma)
    K = y / (float(s.I.mean()) * spec.r)
    growth, _, ewt = _weights(spec, s.n_cells)
    buf = np.empty(s.n_cells + 1)
    vals = np.empty(n_paths)
    for i in range(n_paths):
        vals[i] = _floor_budget(_rng(spec.seed, i), s.n_cells, *spec._params(), growth, ewt, K, q,
                                1.0 / utility.gamma, buf)
    return _mean_se(vals)


# ----------------------------------------------------------------------
# Three regimes and the q-floor
# ----------------------------------------------------------------------
def drawdown_formula_check(c: PathPanel, y: float, Z: PathPanel, lam: float, utility: Utility,
                           tol: float = 1e-8) -> dict:
    """Residual of c against lam*cbar v I(yZ) ^ cbar, with regime labels per cell."""
    cbar = running_esssup_interior(c).values
    t = c.grid.left[None, :]
    inv = utility.I(t, y * Z.values)
    formula = np.maximum(lam * cbar, np.minimum(inv, cbar))
    resid = np.abs(c.values - formula)
    band = tol * np.maximum(1.0, cbar)
    labels = np.full(c.values.shape, "unconstrained", dtype=object)
    labels[inv < lam * cbar - band] = "min"
    labels[inv > cbar + band] = "max"
    return {"residual": resid, "max_residual": float(resid.max()), "labels": labels,
            "formula": formula}


def floor_lift(c_hat, q: float, lam: float, inv_marg) -> np.ndarray:
    """c_hat v (lam q v I(yZ) ^ q), all arguments pointwise."""
    return np.maximum(np.asarray(c_hat, float), np.maximum(lam * q, np.minimum(inv_marg, q)))


def floor_lift_and_price(c_hat, q: float, lam: float, y: float, Z, utility: Utility,
                         model: Union[TreeModel, PathPanel]) -> Tuple[np.ndarray, float]:
    if q <= 0 or not 0 < lam <= 1:
        raise ValueError("need q > 0 and lam in (0, 1]")
    if isinstance(model, TreeModel):
        Zv = np.asarray(Z, float)
        c = floor_lift(c_hat, q, lam, utility.I(model.time, y * Zv))
        price = model.pair(c, Zv)
        a = alpha(model, Zv)
    else:
        Zv = Z.values
        c = floor_lift(c_hat.values if isinstance(c_hat, PathPanel) else c_hat, q, lam,
                       utility.I(model.grid.left[None, :], y * Zv))
        price = pairing(model.like(c), Z)
        a = pairing(Z, Z.like(1.0))
        c = model.like(c)
    if price < a * lam * q * (1 - 1e-12):
        raise AssertionError("lifted plan costs less than the floor")
    return c, price


def price_map(tree: TreeModel, Z, utility: Utility, xs, q: float, lam: float) -> np.ndarray:
    """pi(x) on a grid of budgets; checked to be non-decreasing."""
    out = []
    for x in xs:
        sol = solve_primal_tree(tree, Z, utility, float(x), 0.0, lam)
        out.append(floor_lift_and_price(sol.c, q, lam, sol.y, Z, utility, tree)[1])
    out = np.asarray(out)
    order = np.argsort(xs)
    if np.any(np.diff(out[order]) < -1e-10 * np.abs(out).max()):
        raise AssertionError("price map is not monotone")
    return out


def match_floor_budget(x_target: float, q: float, lam: float, tree: TreeModel, Z, utility: Utility,
                       rel_tol: float = 1e-12) -> dict:
    """Find the budget whose floored plan costs x_target (bracketed root of pi)."""
    Z = np.asarray(Z, float)
    edge = alpha(tree, Z) * lam * q
    if x_target <= edge:
        raise InfeasibleError(f"x_target={x_target} is not above alpha*lam*q={edge}")

    def lifted(x):
        sol = solve_primal_tree(tree, Z, utility, x, 0.0, lam)
        c, p = floor_lift_and_price(sol.c, q, lam, sol.y, Z, utility, tree)
        return c, p, sol

    # c >= c_hat(x) gives pi(x) >= x, so x_target is an upper bracket
    hi = x_target
    lo = x_target
    for _ in range(200):
        lo *= 0.5
        if lifted(lo)[1] < x_target:
            break
    else:
        raise RuntimeError("could not bracket the floored budget")
    if lifted(hi)[1] > x_target:
        hi = brentq(lambda x: lifted(x)[1] - x_target, lo, hi, xtol=rel_tol * x_target, rtol=1e-15)
    c, p, sol = lifted(hi)
    u = float(np.sum(tree.weight * utility.U(tree.time, c)))
    return {"x": hi, "c": c, "pi": p, "utility": u, "y": sol.y}
