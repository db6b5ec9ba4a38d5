"""Running essential supremum on piecewise-constant panels.

Convention: the running esssup on cell k is its value at the left edge
t_k, i.e. the max over cells 0..k-1 (and 0 on cell 0). Cells have
positive length, so a cell value counts toward the esssup as soon as the
cell starts; `running_esssup_interior` gives the value on the open cell
(max over 0..k), which is what the pointwise drawdown formulas need.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .grid import PathPanel, TimeGrid


@dataclass(frozen=True)
class DebutProfile:
    levels: np.ndarray   # (m,) increasing, starts at 0
    times: np.ndarray    # (n_scenarios, m) debut time per level
    grid: TimeGrid

    def __post_init__(self):
        if np.any(np.diff(self.times, axis=1) < 0):
            raise ValueError("debut times must be non-decreasing in the level")


def _prefix_max(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    if v.shape[1] > 1:
        out[:, 1:] = np.maximum.accumulate(v[:, :-1], axis=1)
    return out


def essential_debut(c: PathPanel, level: float) -> np.ndarray:
    """Left edge of the first cell with value >= level, per scenario (horizon if none)."""
    if level < 0:
        raise ValueError("level must be non-negative")
    hit = c.values >= level
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), c.grid.n_cells)
    return c.grid.edges[first]


def running_esssup(c: PathPanel) -> PathPanel:
    return c.like(_prefix_max(c.values))


def running_esssup_interior(c: PathPanel) -> PathPanel:
    return c.like(np.maximum.accumulate(c.values, axis=1))


def debut_profile(c: PathPanel) -> DebutProfile:
    levels = np.union1d([0.0], np.unique(c.values))
    times = np.stack([essential_debut(c, l) for l in levels], axis=1)
    return DebutProfile(levels, times, c.grid)


def generalized_inverse(profile: DebutProfile) -> np.ndarray:
    """sup{l : tau^l < t_k} on every cell, from the debut times alone."""
    t = profile.grid.left
    # before[s, k, j]: level j debuted strictly before t_k on scenario s
    before = profile.times[:, None, :] < t[None, :, None]
    lv = np.where(before, profile.levels[None, None, :], 0.0)
    return lv.max(axis=2)


def check_drawdown(c: PathPanel, lam: float, q: float = 0.0) -> Tuple[np.ndarray, float]:
    """Cellwise test of c >= lam * (cbar v q); returns (ok mask, worst violation)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    floor = lam * np.maximum(_prefix_max(c.values), q)
    gap = floor - c.values
    ok = gap <= 0.0
    return ok, float(max(gap.max(), 0.0))


def solid_hull_lift(c: PathPanel, lam: float, q: float = 0.0) -> PathPanel:
    """c v lam (cbar v q): the smallest plan above c meeting the drawdown constraint."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    cbar = _prefix_max(c.values)
    lifted = np.maximum(c.values, lam * np.maximum(cbar, q))
    ok, _ = check_drawdown(c.like(lifted), lam, q)
    expected = cbar.copy()
    expected[:, 1:] = np.maximum(expected[:, 1:], lam * q)
    if not ok.all() or not np.array_equal(_prefix_max(lifted), expected):
        raise AssertionError("lift postcondition failed")
    return c.like(lifted)


def minimality_check(c: PathPanel, dominating: np.ndarray) -> bool:
    """If c <= c' cellwise for a non-decreasing c', then cbar <= c' too."""
    d = np.asarray(dominating, dtype=float)
    if np.any(np.diff(d, axis=1) < 0):
        raise ValueError("dominating panel must be non-decreasing per scenario")
    if not np.all(c.values <= d):
        return True
    return bool(np.all(_prefix_max(c.values) <= d))
