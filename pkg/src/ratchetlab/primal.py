"""Drawdown-constrained utility maximization on trees and its dual certificate.

The problem on a tree is

    maximize   sum_u w_u U(t_u, c_u)
    subject to c_u >= lam * c_v   for every strict ancestor v of u
               c_u >= lam * q
               sum_u w_u Z_u c_u <= x

with w_u = probability times clock mass. It is solved by a feasible
primal-dual interior point method followed by an active-set polish that
pins binding constraints to machine precision.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .tree import TreeModel, alpha, chron_leq_lambda, lambda_parts, optional_projection
from .utility import Utility


class InfeasibleError(ValueError):
    """Budget/floor pair outside the open cone x > alpha * lam * q."""


class ConvergenceError(RuntimeError):
    pass


@dataclass
class PrimalSolution:
    c: np.ndarray
    u_hat: float
    y: float
    r: float
    x: float
    q: float
    lam: float
    kkt: Dict[str, float] = field(default_factory=dict)
    multipliers: Optional[np.ndarray] = None
    iterations: int = 0
    boundary: bool = False


def _constraint_rows(tree: TreeModel, lam: float, q: float):
    """Sparse G, h for G c <= h (everything except the budget)."""
    rows, cols, vals, h, kind = [], [], [], [], []
    r = 0
    if lam > 0:
        for u in range(1, tree.n_nodes):
            anc = [int(tree.parent[u])] if lam == 1.0 else tree.ancestors(u)
            for v in anc:
                rows += [r, r]
                cols += [v, u]
                vals += [lam, -1.0]
                h.append(0.0)
                kind.append(0)
                r += 1
    floor = max(lam * q, 0.0)
    for u in range(tree.n_nodes):
        rows.append(r)
        cols.append(u)
        vals.append(-1.0)
        h.append(-floor)
        kind.append(1 if lam * q > 0 else 2)
        r += 1
    G = sp.csr_matrix((vals, (rows, cols)), shape=(r, tree.n_nodes))
    return G, np.asarray(h), np.asarray(kind)


def _interior_start(tree: TreeModel, Z, x, lam, q, spread: float = 1.0, fill: float = 0.5):
    floor = max(lam * q, 0.0)
    g = 1.0 + spread * tree.depth
    b = tree.weight * Z
    zeta = fill * (x - floor * b.sum()) / np.dot(b, g)
    return floor + zeta * g


def _solve_newton(H, G, d, b, db, rhs, dense: bool):
    """Solve (diag(H) + G' diag(d) G + db b b') v = rhs."""
    M = G.T @ sp.diags(d) @ G + sp.diags(H)
    if dense:
        Md = M.toarray() + db * np.outer(b, b)
        try:
            return np.linalg.solve(Md, rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(Md, rhs, rcond=None)[0]
    lu = spla.splu(M.tocsc())
    v1 = lu.solve(rhs)
    v2 = lu.solve(b)
    return v1 - v2 * (db * np.dot(b, v1) / (1.0 + db * np.dot(b, v2)))


def _kkt(grad_f, G, h, z, b, x, zb, c) -> Dict[str, float]:
    """Relative KKT residuals for max f s.t. G c <= h, b.c <= x."""
    scale = max(float(np.max(np.abs(grad_f))), 1e-300)
    stat = grad_f - G.T @ z - zb * b
    slack = h - G @ c
    sb = x - np.dot(b, c)
    feas = max(float(np.max(-slack, initial=0.0)), -sb, 0.0)
    cscale = max(float(np.max(np.abs(c))), 1e-300)
    comp = max(float(np.max(np.abs(z * slack), initial=0.0)), abs(zb * sb))
    return {
        "stationarity": float(np.max(np.abs(stat))) / scale,
        "feasibility": feas / max(cscale, abs(x)),
        "complementarity": comp / max(scale * cscale, 1e-300),
        "dual_sign": float(max(-np.min(z, initial=0.0), -zb, 0.0)) / scale,
    }


def solve_primal_tree(tree: TreeModel, Z, utility: Utility, x: float, q: float = 0.0, lam: float = 1.0,
                      tol: float = 1e-8, max_iter: int = 200, init: Optional[np.ndarray] = None,
                      polish: bool = True, allow_boundary: bool = False) -> PrimalSolution:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    Z = np.asarray(Z, dtype=float)
    a = alpha(tree, Z)
    edge = max(a * lam * q, 0.0)
    if x <= edge:
        if allow_boundary and x == edge and lam * q > 0:
            warnings.warn("budget on the boundary of the feasible cone: the only plan is c = lam*q")
            c = np.full(tree.n_nodes, lam * q)
            u = float(np.sum(tree.weight * utility.U(tree.time, c)))
            return PrimalSolution(c, u, np.nan, np.nan, x, q, lam, boundary=True)
        raise InfeasibleError(f"x={x!r} is not above alpha*lam*q={edge!r}")

    t = tree.time
    w = tree.weight
    b = w * Z
    G, h, kind = _constraint_rows(tree, lam, q)
    m = G.shape[0]
    dense = tree.n_nodes <= 2048

    c = _interior_start(tree, Z, x, lam, q) if init is None else np.array(init, dtype=float)
    s = h - G @ c
    sb = x - np.dot(b, c)
    if np.any(s <= 0) or sb <= 0 or np.any(c <= 0):
        raise ValueError("starting point is not strictly feasible")
    grad = w * utility.dU(t, c)
    mu0 = float(np.dot(grad, c)) / (m + 1)
    z = mu0 / s
    zb = mu0 / sb

    it = 0
    for it in range(1, max_iter + 1):
        grad = w * utility.dU(t, c)
        hess = -w * utility.d2U(t, c)
        mu = (np.dot(s, z) + sb * zb) / (m + 1)
        res = _kkt(grad, G, h, z, b, x, zb, c)
        if max(res.values()) < 1e-13:
            break
        sigma = 0.1 if it > 3 else 0.3
        target = sigma * mu
        rhs = grad - G.T @ (target / s) - b * (target / sb)
        dc = _solve_newton(hess, G, z / s, b, zb / sb, rhs, dense)
        ds = -(G @ dc)
        dsb = -np.dot(b, dc)
        dz = (target - s * z - z * ds) / s
        dzb = (target - sb * zb - zb * dsb) / sb
        step = 1.0
        for v, dv in ((s, ds), (z, dz), (np.array([sb]), np.array([dsb])),
                      (np.array([zb]), np.array([dzb])), (c, dc)):
            neg = dv < 0
            if np.any(neg):
                step = min(step, 0.995 * float(np.min(-v[neg] / dv[neg])))
        c = c + step * dc
        z = z + step * dz
        zb = zb + step * dzb
        # carry slacks along the step: recomputing h - G c loses them to rounding
        s = s + step * ds
        sb = sb + step * dsb
        if mu < 1e-18 * mu0:
            break
    grad = w * utility.dU(t, c)
    res = _kkt(grad, G, h, z, b, x, zb, c)

    if polish and dense:
        c, z, zb, res = _polish(tree, utility, G, h, b, x, c, z, zb, s, res)

    if max(res.values()) > tol:
        raise ConvergenceError(f"KKT residuals above tolerance after {it} iterations: {res}")
    u_hat = float(np.sum(w * utility.U(t, c)))
    r_kkt = -lam * float(np.sum(z[kind == 1]))
    return PrimalSolution(c, u_hat, float(zb), r_kkt, float(x), float(q), float(lam), res, z, it)


def _polish(tree, utility, G, h, b, x, c, z, zb, s, res):
    """Newton on the equality system of the apparent active set."""
    t, w = tree.time, tree.weight
    active = np.flatnonzero(z > s)
    GA = G[active].toarray()
    n, k = tree.n_nodes, active.size
    A = np.vstack([GA, b[None, :]])
    cc = c.copy()
    mult = None
    for _ in range(30):
        grad = w * utility.dU(t, cc)
        hess = -w * utility.d2U(t, cc)
        K = np.zeros((n + k + 1, n + k + 1))
        K[:n, :n] = np.diag(hess)
        K[:n, n:] = A.T
        K[n:, :n] = A
        rhs = np.concatenate([grad, np.append(h[active], x) - A @ cc])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        step = sol[:n]
        mult = sol[n:]
        if np.any(cc + step <= 0):
            return c, z, zb, res
        cc = cc + step
        if np.max(np.abs(step)) <= 1e-15 * np.max(np.abs(cc)):
            break
    if mult is None:
        return c, z, zb, res
    zz = np.zeros_like(z)
    zz[active] = mult[:k]
    new = _kkt(w * utility.dU(t, cc), G, h, zz, b, x, mult[k], cc)
    if max(new.values()) <= max(res.values()):
        return cc, zz, float(mult[k]), new
    return c, z, zb, res


# ----------------------------------------------------------------------
# Certificates
# ----------------------------------------------------------------------
@dataclass
class DualCertificate:
    fenchel_gap: float
    pairing_identity: float
    budget_gap: float
    duality_gap: float
    member: bool
    member_residual: float
    r_dual: float
    delta_hat: np.ndarray
    yZ: np.ndarray
    labels: np.ndarray
    valid: bool
    tolerance: float

    def summary(self) -> dict:
        return {"fenchel_gap": self.fenchel_gap, "pairing_identity": self.pairing_identity,
                "budget_gap": self.budget_gap, "duality_gap": self.duality_gap,
                "member": self.member, "member_residual": self.member_residual,
                "r_dual": self.r_dual, "valid": self.valid, "tolerance": self.tolerance}


def dual_r(tree: TreeModel, delta_hat, yZ, lam: float) -> float:
    up, down = lambda_parts(delta_hat, yZ, lam)
    return tree.pair(up - down, np.ones(tree.n_nodes))


def certify_duality(sol: PrimalSolution, tree: TreeModel, Z, utility: Utility, tol: float = 1e-8) -> DualCertificate:
    t = tree.time
    c = sol.c
    delta_hat = utility.dU(t, c)
    yZ = sol.y * np.asarray(Z, dtype=float)
    member, worst = chron_leq_lambda(tree, delta_hat, yZ, sol.lam, tol)
    r = dual_r(tree, delta_hat, yZ, sol.lam)
    ones = np.ones(tree.n_nodes)
    vv = utility.V(t, delta_hat)
    fenchel = tree.pair(vv + c * delta_hat - utility.U(t, c), ones)
    pair_id = abs(tree.pair(c, delta_hat) - (sol.x * sol.y + sol.q * r))
    budget = abs(tree.pair(c, Z) - sol.x)
    dual_value = tree.pair(vv, ones) + sol.x * sol.y + sol.q * r
    dgap = abs(sol.u_hat - dual_value)
    foc = verify_foc_regions(sol, tree, Z, utility, tol)
    scale = max(1.0, abs(sol.x * sol.y))
    valid = bool(member and abs(fenchel) <= tol and pair_id <= tol * scale and budget <= tol * max(1.0, sol.x)
                 and dgap <= tol * max(1.0, abs(sol.u_hat)) and foc["valid"])
    return DualCertificate(abs(fenchel), pair_id, budget, dgap, bool(member), worst, r,
                           delta_hat, yZ, foc["labels"], valid, tol)


def verify_foc_regions(sol: PrimalSolution, tree: TreeModel, Z, utility: Utility, tol: float = 1e-8) -> dict:
    """Three-regime labels and the projected-tail condition at increase points.

    With a positive floor the running esssup is replaced by its floored
    version cbar v q; the floor's own jump at time 0 carries no equality
    requirement.
    """
    t = tree.time
    c = sol.c
    lam, q = sol.lam, sol.q
    delta_hat = utility.dU(t, c)
    yZ = sol.y * np.asarray(Z, dtype=float)
    eff = tree.running_esssup_interior(c)
    eff_left = tree.running_esssup(c)
    if q > 0:
        eff = np.maximum(eff, q)
        eff_left = np.maximum(eff_left, q)
        eff_left[0] = 0.0
    lo, hi = lam * eff, eff
    inv = utility.I(t, yZ)
    formula = np.maximum(lo, np.minimum(inv, hi))
    cscale = max(1.0, float(np.max(np.abs(c))))
    formula_resid = float(np.max(np.abs(c - formula))) / cscale

    band = tol * np.maximum(np.abs(delta_hat), np.abs(yZ))
    labels = np.full(tree.n_nodes, "unconstrained", dtype=object)
    labels[yZ - delta_hat > band] = "min"
    labels[delta_hat - yZ > band] = "max"
    target = np.where(labels == "min", lo, np.where(labels == "max", hi, inv))
    label_resid = float(np.max(np.abs(c - target))) / cscale

    up, down = lambda_parts(delta_hat, yZ, lam)
    ft = optional_projection(tree, up)
    gt = optional_projection(tree, down)
    tscale = max(1.0, float(np.max(gt)), float(np.max(ft)))
    ineq = float(np.max(ft - gt)) / tscale
    increase = eff > eff_left + tol * cscale
    if q > 0:
        increase &= eff > q + tol * cscale
    eq = float(np.max(np.abs(ft - gt)[increase], initial=0.0)) / tscale
    valid = formula_resid <= tol and label_resid <= tol and ineq <= tol and eq <= tol
    return {"labels": labels, "increase": increase, "formula_residual": formula_resid,
            "label_residual": label_resid, "tail_inequality": ineq, "tail_equality": eq,
            "valid": bool(valid)}


# ----------------------------------------------------------------------
# Value surface
# ----------------------------------------------------------------------
def value_surface(tree: TreeModel, Z, utility: Utility, xs, qs, lam: float, tol: float = 1e-6) -> dict:
    xs = np.asarray(xs, dtype=float)
    qs = np.asarray(qs, dtype=float)
    a = alpha(tree, Z)
    nx, nq = xs.size, qs.size
    U = np.empty((nx, nq))
    Y = np.empty((nx, nq))
    R = np.empty((nx, nq))
    Vd = np.empty((nx, nq))
    ones = np.ones(tree.n_nodes)
    for i, x in enumerate(xs):
        for j, q in enumerate(qs):
            sol = solve_primal_tree(tree, Z, utility, x, q, lam)
            cert = certify_duality(sol, tree, Z, utility)
            U[i, j] = sol.u_hat
            Y[i, j] = sol.y
            R[i, j] = cert.r_dual
            Vd[i, j] = tree.pair(utility.V(tree.time, cert.delta_hat), ones)

    def fd(vals, grid, axis):
        d = np.diff(vals, axis=axis) / np.diff(grid).reshape((-1, 1) if axis == 0 else (1, -1))
        pad = [(0, 0), (0, 0)]
        pad[axis] = (1, 0)
        back = np.pad(d, pad, constant_values=np.nan)
        pad[axis] = (0, 1)
        fwd = np.pad(d, pad, constant_values=np.nan)
        return np.fmin(back, fwd), np.fmax(back, fwd)

    y_lo, y_hi = fd(U, xs, 0)
    r_lo, r_hi = fd(U, qs, 1) if nq > 1 else (np.zeros_like(U), np.zeros_like(U))

    def concave_along(vals, grid, axis):
        v = np.moveaxis(vals, axis, 0)
        worst = 0.0
        for k in range(1, grid.size - 1):
            wgt = (grid[k + 1] - grid[k]) / (grid[k + 1] - grid[k - 1])
            chord = wgt * v[k - 1] + (1 - wgt) * v[k + 1]
            worst = max(worst, float(np.max(chord - v[k])))
        return worst

    concavity = max(concave_along(U, xs, 0), concave_along(U, qs, 1) if nq > 2 else 0.0)
    ys = np.abs(Y).max()
    in_lstar = bool(np.all(Y > 0) and np.all(R <= tol * ys) and np.all(R > -a * lam * Y - tol * ys))
    fd_ok = bool(np.all(np.nan_to_num(y_hi, nan=1.0) > 0)
                 and np.all(np.nan_to_num(r_lo, nan=0.0) <= tol * ys))
    conj = np.empty_like(U)
    for i, x in enumerate(xs):
        for j, q in enumerate(qs):
            conj[i, j] = np.min(Vd + x * Y + q * R)
    conj_resid = float(np.max(np.abs(conj - U)))
    return {"x": xs, "q": qs, "u": U, "y": Y, "r": R, "y_interval": (y_lo, y_hi), "r_interval": (r_lo, r_hi),
            "concavity_violation": concavity, "in_Lstar": in_lstar, "fd_in_Lstar": fd_ok,
            "conjugacy_residual": conj_resid, "alpha": a}
