"""Quick invariant sweep used by `ratchetlab selftest`."""
from __future__ import annotations

import numpy as np

from .complete import KernelSpec, budget_match_riedel
from .envelope import alternative_solution
from .esssup import debut_profile, generalized_inverse, running_esssup
from .grid import Clock, PathPanel, TimeGrid
from .primal import certify_duality, solve_primal_tree
from .tree import (chron_leq, chron_leq_lambda, random_deflator, random_tree,
                   stopping_enumeration_check, worked_tree)
from .utility import Utility


def _worked(rng):
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, Utility.log(), 7.0)
    cert = certify_duality(sol, tree, Z, Utility.log())
    err = float(np.max(np.abs(sol.c - [3, 3, 7]))) + abs(sol.y - 2 / 7)
    return cert.valid and err < 1e-6, f"c={sol.c.round(9).tolist()} y={sol.y:.12g}"


def _esssup(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 33))
        v = rng.integers(0, 6, size=(2, n)).astype(float)
        g = TimeGrid.uniform(n, 1.0)
        c = PathPanel(v, g, Clock.lebesgue(g))
        bar = running_esssup(c).values
        brute = np.array([[v[s, :k].max() if k else 0.0 for k in range(n)] for s in range(2)])
        worst = max(worst, float(np.abs(bar - brute).max()),
                    float(np.abs(generalized_inverse(debut_profile(c)) - bar).max()))
    return worst == 0.0, f"max deviation {worst:.3g}"


def _ordering(rng):
    bad = 0
    for _ in range(20):
        tree = random_tree(rng, int(rng.integers(1, 4)))
        a = rng.uniform(0, 1, tree.n_nodes)
        b = rng.uniform(0, 1, tree.n_nodes)
        if chron_leq(tree, a, b)[0] != stopping_enumeration_check(tree, a, b):
            bad += 1
        if chron_leq_lambda(tree, a, b, 0.3)[0] and not chron_leq_lambda(tree, a, b, 0.8)[0]:
            bad += 1
    return bad == 0, f"{bad} disagreements"


def _envelope(rng):
    worst = 0.0
    for _ in range(5):
        tree = random_tree(rng, int(rng.integers(2, 5)))
        Z = random_deflator(tree, rng)
        res = alternative_solution(tree, Z, Utility(2.0), float(rng.uniform(0.2, 2.0)))
        worst = max(worst, res["sup_diff"] / max(1e-6, res["eta"]))
    return worst <= 1.0, f"worst sup_diff / tolerance {worst:.3g}"


def _perpetuity(rng):
    spec = KernelSpec(theta=0.0, r=0.05, delta_pref=0.05, trunc_tol=1e-12)
    plan = budget_match_riedel(spec, Utility.log(0.05, 0.05), 10.0, 4, store=2)
    err = float(np.abs(plan.stored["c"] - 0.5).max())
    return err <= 1e-9, f"max |c - x r| = {err:.3g}"


CHECKS = {
    "worked_tree": _worked,
    "esssup_oracle": _esssup,
    "ordering_oracle": _ordering,
    "envelope_vs_primal": _envelope,
    "riedel_perpetuity": _perpetuity,
}


def run_selftest(seed: int = 0) -> dict:
    out = {}
    for name, fn in CHECKS.items():
        rng = np.random.default_rng([seed, len(out)])
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, not a crash of the runner
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out[name] = {"ok": bool(ok), "detail": detail}
    return out
