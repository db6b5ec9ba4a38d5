"""Finite non-recombining event trees.

A node at depth k is a full history up to cell k and carries the value
of every optional process on the cell [t_k, t_{k+1}). Node processes are
plain float arrays indexed by node id.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .grid import Clock, PathPanel, TimeGrid

TREE_SCHEMA = "ratchetlab.tree/1"


class CapacityError(RuntimeError):
    pass


class ConstructionError(RuntimeError):
    pass


class TreeModel:
    """Event tree with transition probabilities, cell lengths and clock density."""

    def __init__(self, parent, cond_prob, cell_dt, kappa_dot=None, tol: float = 1e-12):
        parent = np.asarray(parent, dtype=np.int64)
        n_nodes = parent.size
        if n_nodes == 0 or parent[0] != -1 or np.any(parent[1:] < 0):
            raise ValueError("node 0 must be the unique root")
        if np.any(parent[1:] >= np.arange(1, n_nodes)):
            raise ValueError("parents must precede their children")
        cond = np.asarray(cond_prob, dtype=float)
        if cond.shape != (n_nodes,) or np.any(cond[1:] <= 0) or cond[0] != 1.0:
            raise ValueError("transition probabilities must be positive (root has 1)")
        depth = np.zeros(n_nodes, dtype=np.int64)
        for u in range(1, n_nodes):
            depth[u] = depth[parent[u]] + 1
        dt = np.asarray(cell_dt, dtype=float)
        if dt.ndim != 1 or dt.size != depth.max() + 1 or np.any(dt <= 0):
            raise ValueError("need one positive duration per depth level")
        kd = np.ones(n_nodes) if kappa_dot is None else np.asarray(kappa_dot, dtype=float)
        if kd.shape != (n_nodes,) or np.any(kd <= 0):
            raise ValueError("clock density must be positive at every node")

        sums = np.zeros(n_nodes)
        np.add.at(sums, parent[1:], cond[1:])
        n_children = np.bincount(parent[1:], minlength=n_nodes)
        inner = n_children > 0
        if np.any(np.abs(sums[inner] - 1.0) > tol):
            raise ValueError("transition probabilities must sum to one at each node")
        if np.any(depth[~inner] != dt.size - 1):
            raise ValueError("every leaf must sit at the last depth")

        self.parent = parent
        self.cond_prob = cond
        self.depth = depth
        self.cell_dt = dt
        self.kappa_dot = kd
        self.n_nodes = n_nodes
        self.n_cells = dt.size
        self.by_depth = [np.flatnonzero(depth == d) for d in range(self.n_cells)]
        prob = np.ones(n_nodes)
        for d in range(1, self.n_cells):
            nodes = self.by_depth[d]
            prob[nodes] = prob[parent[nodes]] * cond[nodes]
        self.prob = prob
        self.children: List[np.ndarray] = [np.flatnonzero(parent == u) for u in range(n_nodes)]
        self.leaves = self.by_depth[-1]
        # paths[i, d] = ancestor at depth d of leaf i
        paths = np.empty((self.leaves.size, self.n_cells), dtype=np.int64)
        paths[:, -1] = self.leaves
        for d in range(self.n_cells - 1, 0, -1):
            paths[:, d - 1] = parent[paths[:, d]]
        self.paths = paths
        for a in (self.parent, self.cond_prob, self.depth, self.cell_dt, self.kappa_dot, self.prob, self.paths):
            a.setflags(write=False)

    # ------------------------------------------------------------------
    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.cell_dt)])

    @property
    def time(self) -> np.ndarray:
        """Left edge of each node's cell."""
        return self.edges[self.depth]

    @property
    def mass(self) -> np.ndarray:
        """Clock mass of each node's cell."""
        return self.kappa_dot * self.cell_dt[self.depth]

    @property
    def weight(self) -> np.ndarray:
        """Probability times clock mass: the measure behind every pairing."""
        return self.prob * self.mass

    def pair(self, a, b) -> float:
        return float(np.sum(self.weight * np.asarray(a, float) * np.asarray(b, float)))

    def tail(self, integrand) -> np.ndarray:
        return optional_projection(self, integrand)

    def children_average(self, values) -> np.ndarray:
        """sum_children p_child * values[child]; zero at leaves."""
        v = np.asarray(values, dtype=np.longdouble)
        out = np.zeros(self.n_nodes, dtype=np.longdouble)
        np.add.at(out, self.parent[1:], self.cond_prob[1:] * v[1:])
        return out

    def running_esssup(self, values) -> np.ndarray:
        """Max over strict ancestors (0 at the root): a predictable node process."""
        v = np.asarray(values, dtype=float)
        out = np.zeros(self.n_nodes)
        for d in range(1, self.n_cells):
            nodes = self.by_depth[d]
            p = self.parent[nodes]
            out[nodes] = np.maximum(out[p], v[p])
        return out

    def running_esssup_interior(self, values) -> np.ndarray:
        """Max over the node and its ancestors: the esssup on the open cell."""
        return np.maximum(self.running_esssup(values), np.asarray(values, dtype=float))

    def subtree(self, u: int) -> np.ndarray:
        out, frontier = [u], [u]
        while frontier:
            nxt = np.concatenate([self.children[v] for v in frontier])
            out.extend(nxt.tolist())
            frontier = nxt.tolist()
        return np.asarray(out, dtype=np.int64)

    def ancestors(self, u: int) -> List[int]:
        out = []
        while self.parent[u] >= 0:
            u = int(self.parent[u])
            out.append(u)
        return out

    def grid(self) -> TimeGrid:
        return TimeGrid(self.edges)

    def to_panel(self, values) -> PathPanel:
        """Lay a node process out as one scenario per leaf path."""
        g = self.grid()
        clock = Clock(g, self.mass[self.paths])
        v = np.asarray(values, dtype=float)[self.paths]
        w = self.prob[self.leaves]
        return PathPanel(v, g, clock, w / w.sum())

    # ------------------------------------------------------------------
    def to_json(self, processes: Optional[Dict[str, Sequence[float]]] = None) -> str:
        nodes = [
            {"id": int(u), "parent": None if u == 0 else int(self.parent[u]),
             "p": float(self.cond_prob[u]), "kappa_dot": float(self.kappa_dot[u])}
            for u in range(self.n_nodes)
        ]
        doc = {"schema": TREE_SCHEMA, "cell_dt": self.cell_dt.tolist(), "nodes": nodes,
               "processes": {k: [float(x) for x in v] for k, v in (processes or {}).items()}}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Tuple["TreeModel", Dict[str, np.ndarray]]:
        doc = json.loads(text)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> Tuple["TreeModel", Dict[str, np.ndarray]]:
        if doc.get("schema") != TREE_SCHEMA:
            raise ValueError(f"unsupported tree schema {doc.get('schema')!r}")
        nodes = sorted(doc["nodes"], key=lambda n: n["id"])
        if [n["id"] for n in nodes] != list(range(len(nodes))):
            raise ValueError("node ids must be 0..N-1")
        parent = [-1 if n["parent"] is None else n["parent"] for n in nodes]
        tree = cls(parent, [n["p"] for n in nodes], doc["cell_dt"],
                   [n.get("kappa_dot", 1.0) for n in nodes])
        procs = {}
        for name, vals in doc.get("processes", {}).items():
            arr = np.asarray(vals, dtype=float)
            if arr.shape != (tree.n_nodes,):
                raise ValueError(f"process {name!r} needs one value per node")
            procs[name] = arr
        return tree, procs


# ----------------------------------------------------------------------
# Builders
# ----------------------------------------------------------------------
def chain(n_cells: int, dt: float = 1.0, kappa_dot: float = 1.0) -> TreeModel:
    parent = np.arange(-1, n_cells - 1)
    return TreeModel(parent, np.ones(n_cells), np.full(n_cells, dt), np.full(n_cells, kappa_dot))


def from_branching(probs_per_level: Sequence[Sequence[float]], cell_dt=None, kappa_dot=None) -> TreeModel:
    """Regular tree: every node at depth d has children with probabilities probs_per_level[d]."""
    parent, cond, frontier = [-1], [1.0], [0]
    for probs in probs_per_level:
        nxt = []
        for u in frontier:
            for p in probs:
                parent.append(u)
                cond.append(float(p))
                nxt.append(len(parent) - 1)
        frontier = nxt
    n = len(probs_per_level) + 1
    dt = np.ones(n) if cell_dt is None else cell_dt
    return TreeModel(parent, cond, dt, kappa_dot)


def worked_tree() -> Tuple[TreeModel, np.ndarray]:
    """One-period binary tree: Z = 1 at the root, 1.5 / 0.5 at the children."""
    tree = from_branching([[0.5, 0.5]])
    return tree, np.array([1.0, 1.5, 0.5])


def random_tree(rng: np.random.Generator, n_cells: int, branching=(2, 3),
                random_dt: bool = False, random_clock: bool = False) -> TreeModel:
    parent, cond, frontier = [-1], [1.0], [0]
    for _ in range(n_cells - 1):
        nxt = []
        for u in frontier:
            k = int(rng.integers(branching[0], branching[1] + 1))
            p = rng.uniform(0.2, 1.0, size=k)
            p /= p.sum()
            p[-1] = 1.0 - p[:-1].sum()
            for pi in p:
                parent.append(u)
                cond.append(float(pi))
                nxt.append(len(parent) - 1)
        frontier = nxt
    dt = rng.uniform(0.5, 1.5, n_cells) if random_dt else np.ones(n_cells)
    kd = rng.uniform(0.5, 1.5, len(parent)) if random_clock else None
    return TreeModel(parent, cond, dt, kd)


def random_deflator(tree: TreeModel, rng: np.random.Generator, spread: float = 0.5) -> np.ndarray:
    """Positive martingale with Z_root = 1 built from normalized random ratios."""
    Z = np.ones(tree.n_nodes)
    for u in range(tree.n_nodes):
        ch = tree.children[u]
        if ch.size == 0:
            continue
        m = np.exp(rng.uniform(-spread, spread, ch.size))
        m /= np.dot(tree.cond_prob[ch], m)
        Z[ch] = Z[u] * m
    return validate_deflator(tree, Z)


def validate_deflator(tree: TreeModel, Z, tol: float = 1e-12) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.shape != (tree.n_nodes,) or np.any(Z <= 0):
        raise ValueError("deflator must be positive with one value per node")
    if abs(Z[0] - 1.0) > tol:
        raise ValueError("deflator must start at 1")
    avg = tree.children_average(Z)
    inner = np.array([c.size > 0 for c in tree.children])
    if np.any(np.abs(avg[inner] - Z[inner]) > tol * np.maximum(1.0, Z[inner])):
        raise ValueError("deflator is not a martingale on the tree")
    return Z


# ----------------------------------------------------------------------
# Projections and orderings
# ----------------------------------------------------------------------
def optional_projection(tree: TreeModel, integrand) -> np.ndarray:
    """E[ int_{t_u}^T integrand dkappa | node u ] by backward induction."""
    acc = (np.asarray(integrand, dtype=np.longdouble) * tree.mass).astype(np.longdouble)
    for d in range(tree.n_cells - 1, 0, -1):
        nodes = tree.by_depth[d]
        np.add.at(acc, tree.parent[nodes], tree.cond_prob[nodes] * acc[nodes])
    return acc.astype(float)


def chron_leq(tree: TreeModel, lesser, greater, tol: float = 1e-12) -> Tuple[bool, float]:
    """Chronological ordering test: projected tails of `lesser` never exceed those of `greater`.

    Returns the verdict and the worst (largest) node residual.
    """
    a = optional_projection(tree, lesser)
    b = optional_projection(tree, greater)
    resid = a - b
    scale = max(1.0, float(np.max(np.abs(b))), float(np.max(np.abs(a))))
    worst = float(resid.max())
    return worst <= tol * scale, worst


def lambda_parts(lesser, greater, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    lesser = np.asarray(lesser, float)
    greater = np.asarray(greater, float)
    return np.maximum(lesser - greater, 0.0), lam * np.maximum(greater - lesser, 0.0)


def chron_leq_lambda(tree: TreeModel, lesser, greater, lam: float, tol: float = 1e-12) -> Tuple[bool, float]:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    up, down = lambda_parts(lesser, greater, lam)
    return chron_leq(tree, up, down, tol)


@dataclass(frozen=True)
class StoppingRule:
    """Stopping nodes forming an antichain; paths avoiding them run to the horizon."""

    stop: np.ndarray  # bool per node

    def stop_cell(self, tree: TreeModel) -> np.ndarray:
        """Cell index at which each leaf path stops (n_cells means never)."""
        hit = self.stop[tree.paths]
        return np.where(hit.any(axis=1), hit.argmax(axis=1), tree.n_cells)

    def after_mask(self, tree: TreeModel) -> np.ndarray:
        """Nodes lying at or after the stopping time."""
        mask = self.stop.copy()
        for d in range(1, tree.n_cells):
            nodes = tree.by_depth[d]
            mask[nodes] |= mask[tree.parent[nodes]]
        return mask


def count_stopping_rules(tree: TreeModel) -> int:
    count = np.ones(tree.n_nodes, dtype=object)
    for d in range(tree.n_cells - 1, -1, -1):
        for u in tree.by_depth[d]:
            ch = tree.children[u]
            prod = 1
            for c in ch:
                prod *= count[c]
            count[u] = 1 + (prod if ch.size else 1)
    return int(count[0])


def enumerate_stopping_rules(tree: TreeModel, max_rules: int = 1_000_000) -> np.ndarray:
    """All stopping rules as a (n_rules, n_nodes) boolean 'at or after T' matrix."""
    if tree.n_cells > 4:
        raise CapacityError("stopping-rule enumeration is limited to 4 cells")
    total = count_stopping_rules(tree)
    if total > max_rules:
        raise CapacityError(f"{total} stopping rules exceed the cap of {max_rules}")
    subtrees = [tree.subtree(u) for u in range(tree.n_nodes)]

    def rules(u: int) -> List[np.ndarray]:
        here = np.zeros(tree.n_nodes, dtype=bool)
        here[subtrees[u]] = True
        out = [here]
        ch = tree.children[u]
        if ch.size == 0:
            out.append(np.zeros(tree.n_nodes, dtype=bool))
            return out
        combos = [np.zeros(tree.n_nodes, dtype=bool)]
        for c in ch:
            combos = [a | b for a in combos for b in rules(int(c))]
        return out + combos

    return np.array(rules(0))


def stopping_enumeration_check(tree: TreeModel, lesser, greater, tol: float = 1e-12) -> bool:
    """E int_T lesser dkappa <= E int_T greater dkappa for every stopping rule T."""
    after = enumerate_stopping_rules(tree)
    a = after @ (tree.weight * np.asarray(lesser, float))
    b = after @ (tree.weight * np.asarray(greater, float))
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return bool(np.max(a - b) <= tol * scale)


# ----------------------------------------------------------------------
# Mass shifting
# ----------------------------------------------------------------------
def mass_shift_construction(tree: TreeModel, in_set, delta, window_cells: int = 1,
                            check: bool = True) -> np.ndarray:
    """Move the tail of delta beyond the window onto the window part of the set.

    On each path the window is the `window_cells` cells starting at the
    first cell of the set. The tail of delta after the window is spread
    over window-and-set cells in proportion to clock mass, and the result
    is projected back onto the nodes.
    """
    if window_cells < 1:
        raise ValueError("window must be at least one cell")
    A = np.asarray(in_set, dtype=bool)
    delta = np.asarray(delta, dtype=float)
    n = tree.n_cells
    on_path = A[tree.paths]
    debut = np.where(on_path.any(axis=1), on_path.argmax(axis=1), n)
    cols = np.arange(n)[None, :]
    end = debut[:, None] + window_cells
    window = on_path & (cols >= debut[:, None]) & (cols < end)
    mass = tree.mass[tree.paths]
    wmass = np.sum(window * mass, axis=1)
    flow = delta[tree.paths] * mass
    tail = np.sum(np.where(cols >= end, flow, 0.0), axis=1)
    started = debut < n
    if np.any(wmass[started] <= 0):
        raise ConstructionError("window carries no clock mass after the debut")
    X = np.zeros_like(mass)
    X[started] = window[started] * (tail[started] / wmass[started])[:, None]
    leaf_p = tree.prob[tree.leaves]
    num = np.zeros(tree.n_nodes)
    np.add.at(num, tree.paths.ravel(), (leaf_p[:, None] * X).ravel())
    shifted = num / tree.prob
    if check:
        ok, worst = chron_leq(tree, shifted, delta, 1e-10)
        if not ok:
            raise ConstructionError(f"shifted process is not chronologically below delta ({worst:.3e})")
        target = float(np.dot(leaf_p, tail))
        got = tree.pair(A.astype(float), shifted)
        if abs(got - target) > 1e-10 * max(1.0, abs(target)):
            raise ConstructionError("shifted mass does not reproduce the tail beyond the window")
    return shifted


def important_lemma_check(tree: TreeModel, c, delta, lam: float, window_cells: int = 1) -> dict:
    """Compare <c v lam cbar, delta> with <c, delta~> for the explicit shift delta~ <=_lam delta.

    c is split into its level sets; each level gets the part of delta
    where its own lift attains the overall lift, keeps it on the level set
    and shifts the lam-weighted rest onto the level set after its debut.
    """
    c = np.asarray(c, dtype=float)
    delta = np.asarray(delta, dtype=float)
    cbar = tree.running_esssup(c)
    lhs = tree.pair(np.maximum(c, lam * cbar), delta)
    levels = np.unique(c[c > 0])
    if levels.size == 0:
        return {"lhs": lhs, "achieved": 0.0, "gap": lhs, "member": True, "delta_tilde": np.zeros_like(c)}
    lifts = []
    for v in levels:
        A = c == v
        lifts.append(v * np.maximum(A, lam * (tree.running_esssup(A.astype(float)) > 0)))
    lifts = np.array(lifts)
    best = lifts.argmax(axis=0)
    positive = lifts.max(axis=0) > 0
    delta_tilde = np.zeros_like(c)
    for i, v in enumerate(levels):
        A = c == v
        B = positive & (best == i)
        delta_tilde += delta * (B & A)
        rest = lam * delta * (B & ~A)
        if lam > 0 and np.any(rest > 0):
            delta_tilde += mass_shift_construction(tree, A, rest, window_cells)
    achieved = tree.pair(c, delta_tilde)
    member, _ = chron_leq_lambda(tree, delta_tilde, delta, lam, 1e-10)
    return {"lhs": lhs, "achieved": achieved, "gap": lhs - achieved, "member": member,
            "delta_tilde": delta_tilde}


def admissibility(tree: TreeModel, c, Z, x: float) -> bool:
    return tree.pair(c, Z) <= x + 1e-12


def alpha(tree: TreeModel, Z) -> float:
    return tree.pair(Z, np.ones(tree.n_nodes))
