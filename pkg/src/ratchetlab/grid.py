"""Time grids, clocks, sampled path panels and the basic pairings.

Every process in the package is piecewise constant on right-open cells
[t_k, t_{k+1}), so all time integrals below are exact finite sums.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class StructureError(ValueError):
    """Raised when two objects that must share a grid or shape do not."""


# ----------------------------------------------------------------------
# Time grid and clock
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TimeGrid:
    edges: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or e.size < 2:
            raise ValueError("a grid needs at least two edges")
        if e[0] != 0.0:
            raise ValueError("grid must start at t=0")
        if not np.all(np.diff(e) > 0):
            raise ValueError("cell edges must be strictly increasing")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def uniform(cls, n_cells: int, dt: float, truncated: bool = False) -> "TimeGrid":
        return cls(np.arange(n_cells + 1) * dt, truncated)

    @property
    def n_cells(self) -> int:
        return self.edges.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def left(self) -> np.ndarray:
        return self.edges[:-1]

    @property
    def horizon(self) -> float:
        return float(self.edges[-1])

    def cell_of(self, t: float) -> int:
        """Index of the right-open cell containing t (n_cells for t >= horizon)."""
        return int(np.searchsorted(self.edges, t, side="right") - 1)


@dataclass(frozen=True)
class Clock:
    """Absolutely continuous clock, stored as its mass per cell.

    `mass` has shape (n_cells,) for a deterministic clock or
    (n_scenarios, n_cells) for a per-scenario clock. `bound` is the
    declared uniform bound A on the total clock mass.
    """

    grid: TimeGrid
    mass: np.ndarray
    bound: float = np.inf

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.shape[-1] != self.grid.n_cells:
            raise StructureError("clock mass does not match the grid")
        if not np.all(m > 0):
            raise ValueError("clock density must be strictly positive on every cell")
        total = m.sum(axis=-1)
        if np.any(total > self.bound * (1 + 1e-12)):
            raise ValueError("clock exceeds its declared bound")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @classmethod
    def lebesgue(cls, grid: TimeGrid, bound: Optional[float] = None) -> "Clock":
        return cls(grid, grid.dt.copy(), grid.horizon if bound is None else bound)

    @classmethod
    def exponential(cls, grid: TimeGrid, rate: float) -> "Clock":
        """kappa(t) = (1 - exp(-rate t)) / rate, integrated exactly per cell."""
        if rate <= 0:
            raise ValueError("rate must be positive")
        # per-cell mass directly; differencing kappa underflows far out
        m = np.exp(-rate * grid.left) * (-np.expm1(-rate * grid.dt)) / rate
        return cls(grid, m, 1.0 / rate)

    @classmethod
    def from_density(cls, grid: TimeGrid, density, bound: float = np.inf) -> "Clock":
        return cls(grid, np.asarray(density, dtype=float) * grid.dt, bound)

    @property
    def density(self) -> np.ndarray:
        return self.mass / self.grid.dt

    @property
    def cumulative(self) -> np.ndarray:
        """kappa at the cell edges (last axis has n_cells + 1 entries)."""
        m = np.atleast_2d(self.mass)
        out = np.concatenate([np.zeros((m.shape[0], 1)), np.cumsum(m, axis=1)], axis=1)
        return out[0] if self.mass.ndim == 1 else out

    def tail_mass(self) -> float:
        """Clock mass beyond the truncation horizon, A - kappa(T_trunc)."""
        if not np.isfinite(self.bound):
            return np.inf
        return float(self.bound - np.max(self.mass.sum(axis=-1)))


# ----------------------------------------------------------------------
# Panels
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class PathPanel:
    """Scenario-by-cell matrix of a non-negative piecewise-constant process."""

    values: np.ndarray
    grid: TimeGrid
    clock: Clock
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[1] != self.grid.n_cells:
            raise StructureError("panel width does not match the grid")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("panel values must be finite and non-negative")
        if self.clock.grid is not self.grid and not np.array_equal(self.clock.grid.edges, self.grid.edges):
            raise StructureError("clock lives on a different grid")
        if self.clock.mass.ndim == 2 and self.clock.mass.shape[0] != v.shape[0]:
            raise StructureError("per-scenario clock does not match scenario count")
        w = self.weights
        if w is None:
            w = np.full(v.shape[0], 1.0 / v.shape[0])
        w = np.asarray(w, dtype=float)
        if w.shape != (v.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("scenario weights must be non-negative and sum to 1")
        v.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)

    @property
    def n_scenarios(self) -> int:
        return self.values.shape[0]

    def like(self, values) -> "PathPanel":
        """New panel with the same grid, clock and weights."""
        return PathPanel(np.broadcast_to(values, self.values.shape).copy(), self.grid, self.clock, self.weights)

    def cell_mass(self) -> np.ndarray:
        return np.broadcast_to(self.clock.mass, self.values.shape)


def _check_same(a: PathPanel, b: PathPanel):
    if a.values.shape != b.values.shape:
        raise StructureError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    if not np.array_equal(a.grid.edges, b.grid.edges):
        raise StructureError("panels live on different grids")
    if not np.array_equal(a.weights, b.weights):
        raise StructureError("panels carry different scenario weights")
    if not np.array_equal(np.broadcast_to(a.clock.mass, a.values.shape),
                          np.broadcast_to(b.clock.mass, b.values.shape)):
        raise StructureError("panels carry different clocks")


def pairing(c: PathPanel, delta: PathPanel) -> float:
    """<c, delta> = E int c delta dkappa as an exact cell sum."""
    _check_same(c, delta)
    per_path = np.sum(c.values * delta.values * c.cell_mass(), axis=1)
    return float(np.dot(c.weights, per_path))


def alpha_bound(Z: PathPanel) -> float:
    """E int Z dkappa; the budget of the constant plan c = 1."""
    if np.any(Z.values <= 0):
        raise ValueError("deflator must be strictly positive")
    return pairing(Z, Z.like(1.0))


# ----------------------------------------------------------------------
# Increasing paths and Stieltjes integrals
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class IncreasingPath:
    """Left-continuous non-decreasing path with c(0) = 0.

    c(t) = max{level_j : knot_j < t}, so the path jumps right after each
    knot and dc puts mass level_j - level_{j-1} at knot_j.
    """

    knots: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float).ravel()
        lv = np.asarray(self.levels, dtype=float).ravel()
        if k.shape != lv.shape:
            raise StructureError("knots and levels differ in length")
        if k.size and (np.any(np.diff(k) <= 0) or k[0] < 0):
            raise ValueError("knots must be strictly increasing and non-negative")
        if lv.size and (np.any(np.diff(lv) < 0) or lv[0] < 0):
            raise ValueError("levels must be non-negative and non-decreasing")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "levels", lv)

    @classmethod
    def from_cells(cls, grid: TimeGrid, cell_values) -> "IncreasingPath":
        """Path equal to `cell_values[k]` on the interior of cell k; knots at left edges."""
        v = np.maximum.accumulate(np.asarray(cell_values, dtype=float))
        prev = np.concatenate([[0.0], v[:-1]])
        rise = v > prev
        return cls(grid.left[rise], v[rise])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="left")
        padded = np.concatenate([[0.0], self.levels])
        return padded[idx]

    def increments(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.levels]))

    def on_cells(self, grid: TimeGrid) -> np.ndarray:
        """Value on each cell interior; exact only when knots sit on cell edges."""
        idx = np.searchsorted(self.knots, grid.left, side="right")
        return np.concatenate([[0.0], self.levels])[idx]


def _tail_integral(f_row: np.ndarray, grid: TimeGrid, s: np.ndarray, mass_row=None) -> np.ndarray:
    """int_s^T f dkappa for piecewise-constant f, at arbitrary times s."""
    mass = grid.dt if mass_row is None else mass_row
    cell_int = f_row * mass
    tail = np.concatenate([np.cumsum(cell_int[::-1])[::-1], [0.0]])
    s = np.clip(s, 0.0, grid.horizon)
    k = np.minimum(np.searchsorted(grid.edges, s, side="right") - 1, grid.n_cells - 1)
    frac = (grid.edges[k + 1] - s) / grid.dt[k]
    return tail[k + 1] + frac * cell_int[k]


def stieltjes_pair(D: PathPanel, paths: Sequence[IncreasingPath]) -> float:
    """E int D_t dc_t with dc the knot-increment measure of each path."""
    if len(paths) != D.n_scenarios:
        raise StructureError("need one increasing path per scenario")
    total = 0.0
    for w, row, p in zip(D.weights, D.values, paths):
        if p.knots.size == 0:
            continue
        inside = p.knots < D.grid.horizon
        k = np.searchsorted(D.grid.edges, p.knots[inside], side="right") - 1
        total += w * float(np.dot(row[k], p.increments()[inside]))
    return total


def ibp_check(f: PathPanel, paths: Sequence[IncreasingPath], clock: bool = False) -> float:
    """|E int f c dt - E int (int_s^T f dt) dc_s| computed by two routes.

    With `clock=True` both sides use dkappa instead of dt.
    """
    if len(paths) != f.n_scenarios:
        raise StructureError("need one increasing path per scenario")
    g = f.grid
    mass = f.cell_mass() if clock else np.broadcast_to(g.dt, f.values.shape)
    lhs = rhs = 0.0
    for i, (w, p) in enumerate(zip(f.weights, paths)):
        row = f.values[i]
        # left side: split cells at the knots so c is constant on each piece
        cuts = np.union1d(g.edges, p.knots[(p.knots > 0) & (p.knots < g.horizon)])
        mids = 0.5 * (cuts[:-1] + cuts[1:])
        k = np.searchsorted(g.edges, mids, side="right") - 1
        dens = mass[i][k] / g.dt[k]
        lhs += w * float(np.sum(row[k] * p(mids) * dens * np.diff(cuts)))
        # right side: tail integral of f at each knot, weighted by the jump
        inside = p.knots < g.horizon
        tails = _tail_integral(row, g, p.knots[inside], mass[i])
        rhs += w * float(np.dot(tails, p.increments()[inside]))
    return abs(lhs - rhs)
