"""Envelope process on trees from a family of level-indexed stopping problems.

For each level l the largest optimal time T_l of

    min_T E[ int_T^end (y Z - U'(l)) dkappa ]

is found by backward induction. The envelope plan is the generalized
inverse: on a node's cell it equals the largest level already stopped
at or before that node. This gives the ratchet optimizer without any
dual solve.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .grid import IncreasingPath
from .primal import solve_primal_tree
from .tree import StoppingRule, TreeModel, optional_projection
from .utility import Utility


class ResolutionError(RuntimeError):
    pass


def _stop_flags(tree: TreeModel, Z, utility: Utility, y: float, levels: np.ndarray) -> np.ndarray:
    """Raw 'stop here' flags of the Snell recursion, shape (len(levels), n_nodes).

    Ties go to continuing, so the induced stopping time is the largest
    minimizer.
    """
    lv = np.asarray(levels, dtype=float)[:, None]
    g = y * np.asarray(Z, float)[None, :] - utility.dU(tree.time[None, :], lv)
    flow = (g * tree.mass[None, :]).astype(np.longdouble)
    # tail of g and Snell value, depth by depth from the leaves
    tail = flow.copy()
    value = np.zeros_like(flow)
    stop = np.zeros(flow.shape, dtype=bool)
    for d in range(tree.n_cells - 1, -1, -1):
        idx = tree.by_depth[d]
        if d < tree.n_cells - 1:
            nxt = tree.by_depth[d + 1]
            par = tree.parent[nxt]
            cont_tail = np.zeros_like(flow)
            cont_val = np.zeros_like(flow)
            np.add.at(cont_tail, (slice(None), par), tree.cond_prob[nxt] * tail[:, nxt])
            np.add.at(cont_val, (slice(None), par), tree.cond_prob[nxt] * value[:, nxt])
            tail[:, idx] += cont_tail[:, idx]
            cont = cont_val[:, idx]
        else:
            cont = np.zeros((flow.shape[0], idx.size), dtype=np.longdouble)
        here = tail[:, idx]
        band = 1e-13 * (np.abs(here) + np.abs(cont))
        s = here < cont - band
        stop[:, idx] = s
        value[:, idx] = np.where(s, here, cont)
    return stop


def _reached(tree: TreeModel, stop: np.ndarray) -> np.ndarray:
    """Stopped at the node or one of its ancestors."""
    r = stop.copy()
    for d in range(1, tree.n_cells):
        idx = tree.by_depth[d]
        r[:, idx] |= r[:, tree.parent[idx]]
    return r


def level_stopping(tree: TreeModel, Z, utility: Utility, y: float, level: float) -> StoppingRule:
    if level <= 0:
        raise ValueError("level must be positive")
    raw = _stop_flags(tree, Z, utility, y, np.array([level]))[0]
    # keep only the first flag along each path
    first = raw.copy()
    above = np.zeros(tree.n_nodes, dtype=bool)
    for d in range(1, tree.n_cells):
        idx = tree.by_depth[d]
        above[idx] = above[tree.parent[idx]] | raw[tree.parent[idx]]
    first &= ~above
    return StoppingRule(first)


@dataclass
class LevelSweep:
    levels: np.ndarray
    reached: np.ndarray      # (m, n_nodes) stopped at or before the node
    values: np.ndarray       # envelope level on each node's cell
    eta: float               # final bracket width (absolute level units)
    paths: List[IncreasingPath]


def default_levels(tree: TreeModel, Z, utility: Utility, y: float, m: int = 512) -> np.ndarray:
    inv = utility.I(tree.time, y * np.asarray(Z, float))
    lo, hi = float(inv.min()) * (1 - 1e-6), float(inv.max()) * (1 + 1e-6)
    return np.geomspace(lo, hi, m)


def build_envelope_process(tree: TreeModel, Z, utility: Utility, y: float,
                           level_grid: Optional[np.ndarray] = None, m: int = 512,
                           refine: bool = True, rel_tol: float = 1e-13) -> LevelSweep:
    levels = default_levels(tree, Z, utility, y, m) if level_grid is None else np.sort(np.asarray(level_grid, float))
    reached = _reached(tree, _stop_flags(tree, Z, utility, y, levels))
    if np.any(reached[1:] & ~reached[:-1]):
        raise ResolutionError("stopping times are not monotone in the level")
    if not reached[0].all() or reached[-1].any():
        raise ResolutionError("level grid does not bracket the envelope")
    # index of the highest reached level per node
    k = reached.shape[0] - 1 - np.argmax(reached[::-1], axis=0)
    lo = levels[k].copy()
    hi = levels[k + 1].copy()
    if refine:
        nodes = np.arange(tree.n_nodes)
        for _ in range(200):
            wide = hi - lo > rel_tol * hi
            if not wide.any():
                break
            mid = np.sqrt(lo * hi)
            mid = np.where(wide, mid, lo)
            r = _reached(tree, _stop_flags(tree, Z, utility, y, mid))
            ok = r[nodes, nodes]
            lo = np.where(wide & ok, mid, lo)
            hi = np.where(wide & ~ok, mid, hi)
    values = lo
    eta = float(np.max(hi - lo))
    grid = tree.grid()
    paths = [IncreasingPath.from_cells(grid, values[p]) for p in tree.paths]
    return LevelSweep(levels, reached, values, eta, paths)


def verify_envelope(tree: TreeModel, Z, utility: Utility, y: float, c, tol: float = 1e-8) -> dict:
    """Projected marginal utility below y times projected Z, equal where c rises."""
    c = np.asarray(c, dtype=float)
    parent_val = np.where(tree.parent >= 0, c[np.maximum(tree.parent, 0)], 0.0)
    cscale = max(1.0, float(np.max(np.abs(c))))
    if np.any(c < parent_val - 1e-12 * cscale):
        raise ValueError("plan must be non-decreasing along every path")
    with np.errstate(divide="ignore"):
        marg = utility.dU(tree.time, c)
    lhs = optional_projection(tree, marg) if np.all(np.isfinite(marg)) else np.full(tree.n_nodes, np.inf)
    rhs = y * optional_projection(tree, Z)
    scale = float(np.max(np.abs(rhs)))
    increase = c > parent_val + tol * cscale
    ineq = float(np.max(lhs - rhs)) / scale
    eq = float(np.max(np.abs(lhs - rhs)[increase], initial=0.0)) / scale
    ok = bool(ineq <= tol and eq <= tol)
    return {"lhs": lhs, "rhs": rhs, "increase": increase, "inequality": ineq, "equality": eq, "valid": ok}


def alternative_solution(tree: TreeModel, Z, utility: Utility, y: float, q: float = 0.0,
                         check: bool = True, sweep: Optional[LevelSweep] = None, **kw) -> dict:
    """Envelope plan floored at q, its price, and agreement with the primal oracle."""
    if sweep is None:
        sweep = build_envelope_process(tree, Z, utility, y, **kw)
    c = np.maximum(sweep.values, q)
    x = tree.pair(c, Z)
    out = {"c": c, "x": x, "eta": sweep.eta, "sweep": sweep}
    if check:
        edge = q * tree.pair(Z, np.ones(tree.n_nodes))
        if q > 0 and x <= edge * (1 + 1e-12):
            # boundary of the cone: the constant floor is the only admissible plan
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sol = solve_primal_tree(tree, Z, utility, edge, q, 1.0, allow_boundary=True)
        else:
            sol = solve_primal_tree(tree, Z, utility, x, q, 1.0)
        diff = float(np.max(np.abs(sol.c - c)))
        out.update(primal=sol, sup_diff=diff, agrees=diff <= max(1e-6, sweep.eta))
    return out
