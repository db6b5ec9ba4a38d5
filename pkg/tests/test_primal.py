import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import enumerate_increasing_plans, worked_tree_grid_search
from ratchetlab.esssup import solid_hull_lift
from ratchetlab.primal import (InfeasibleError, certify_duality, solve_primal_tree, value_surface,
                               verify_foc_regions)
from ratchetlab.tree import alpha, chain, random_deflator, random_tree, worked_tree
from ratchetlab.utility import Utility

LOG = Utility.log()
seeds = st.integers(0, 2**32 - 1)

# frozen from the budget-constrained KKT system: the up branch binds (c0 = c1),
# 1/c0 + 1/(2 c1) = y (1 + 1.5/2), 1/(2 c2) = y 0.5/2, budget 7
WORKED_C = np.array([3.0, 3.0, 7.0])
WORKED_Y = 2.0 / 7.0


def test_grid_search_oracle_agrees_with_frozen_values():
    best, arg = worked_tree_grid_search(0.01)
    assert np.allclose(arg, WORKED_C, atol=0.011)
    assert math.isclose(best, math.log(3) + 0.5 * math.log(21), abs_tol=1e-4)


def test_single_cell():
    sol = solve_primal_tree(chain(1), np.ones(1), LOG, 5.0)
    assert math.isclose(sol.c[0], 5.0, rel_tol=1e-9)
    assert math.isclose(sol.u_hat, math.log(5), rel_tol=1e-9)


def test_worked_tree_ratchet():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 7.0)
    assert np.allclose(sol.c, WORKED_C, atol=1e-8)
    assert math.isclose(sol.y, WORKED_Y, rel_tol=1e-9)
    assert math.isclose(sol.u_hat, math.log(3) + 0.5 * math.log(21), rel_tol=1e-12)


def test_worked_tree_unconstrained():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 7.0, lam=0.0)
    assert np.allclose(sol.c, [3.5, 7 / 3, 7.0], atol=1e-8)
    cert = certify_duality(sol, tree, Z, LOG)
    assert np.allclose(cert.delta_hat, cert.yZ, atol=1e-10)
    assert cert.valid and cert.fenchel_gap <= 1e-10
    assert set(cert.labels) == {"unconstrained"}


def test_worked_tree_certificate():
    tree, Z = worked_tree()
    cert = certify_duality(solve_primal_tree(tree, Z, LOG, 7.0), tree, Z, LOG)
    assert cert.valid
    assert np.allclose(cert.delta_hat, [1 / 3, 1 / 3, 1 / 7])
    assert np.allclose(cert.yZ, [2 / 7, 3 / 7, 1 / 7])
    assert cert.fenchel_gap <= 1e-8 and cert.pairing_identity <= 1e-8
    assert cert.labels.tolist() == ["max", "min", "unconstrained"]


def test_worked_tree_foc_tails():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 7.0)
    foc = verify_foc_regions(sol, tree, Z, LOG)
    assert foc["valid"]
    assert foc["increase"].tolist() == [True, False, True]


def test_worked_tree_half_lambda_formula():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 7.0, lam=0.5)
    foc = verify_foc_regions(sol, tree, Z, LOG)
    assert foc["formula_residual"] <= 1e-8 and foc["valid"]


def test_floor_run_dual_multiplier():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 10.5, q=5.0)
    assert np.allclose(sol.c, [5, 5, 7], atol=1e-8)
    cert = certify_duality(sol, tree, Z, LOG)
    # r = (1/5 - 2/7) + (1/5 - 3/7)/2 = -1/5
    assert math.isclose(cert.r_dual, -0.2, rel_tol=1e-9)
    assert math.isclose(sol.r, -0.2, rel_tol=1e-6)
    assert cert.pairing_identity <= 1e-8 and cert.valid


def test_boundary_rejected_and_special_case():
    tree, Z = worked_tree()
    with pytest.raises(InfeasibleError):
        solve_primal_tree(tree, Z, LOG, 7.0, q=3.5)
    with pytest.warns(UserWarning):
        sol = solve_primal_tree(tree, Z, LOG, 7.0, q=3.5, allow_boundary=True)
    assert sol.boundary and np.all(sol.c == 3.5)


def test_outside_cone():
    tree, Z = worked_tree()
    with pytest.raises(InfeasibleError):
        solve_primal_tree(tree, Z, LOG, 5.0, q=3.0, lam=1.0)


def test_matches_brute_force_on_lattice():
    tree, Z = worked_tree()
    levels = np.arange(1, 17) * 0.5
    best = max((LOG.u(c) @ tree.weight, tuple(c)) for c in enumerate_increasing_plans(tree, levels)
               if tree.pair(c, Z) <= 7.0 + 1e-12)
    sol = solve_primal_tree(tree, Z, LOG, 7.0)
    assert sol.u_hat >= best[0] - 1e-12
    assert sol.u_hat - best[0] <= 0.02


@settings(max_examples=25)
@given(seeds, st.sampled_from([0.0, 0.3, 0.7, 1.0]), st.sampled_from([1.0, 2.0, 0.5]))
def test_random_certificates(seed, lam, gamma):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, int(rng.integers(1, 5)), random_dt=True, random_clock=True)
    Z = random_deflator(tree, rng)
    u = Utility(gamma, 0.1, 0.05)
    a = alpha(tree, Z)
    q = float(rng.uniform(0, 1))
    x = a * lam * q + float(rng.uniform(0.5, 3.0))
    sol = solve_primal_tree(tree, Z, u, x, q, lam)
    cert = certify_duality(sol, tree, Z, u)
    assert cert.valid, cert.summary()
    assert abs(tree.pair(sol.c, Z) - x) <= 1e-8 * x


@settings(max_examples=15)
@given(seeds)
def test_unique_from_different_starts(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3)
    Z = random_deflator(tree, rng)
    x = 3.0
    s1 = solve_primal_tree(tree, Z, LOG, x, 0.0, 0.6)
    # a different strictly feasible start: small constant plan
    init = np.full(tree.n_nodes, 0.5 * x / alpha(tree, Z))
    s2 = solve_primal_tree(tree, Z, LOG, x, 0.0, 0.6, init=init)
    assert np.max(np.abs(s1.c - s2.c)) <= 1e-6


@settings(max_examples=15)
@given(seeds, st.sampled_from([0.3, 1.0]))
def test_monotone_in_budget(seed, lam):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3)
    Z = random_deflator(tree, rng)
    lo = solve_primal_tree(tree, Z, LOG, 2.0, 0.0, lam)
    hi = solve_primal_tree(tree, Z, LOG, 2.5, 0.0, lam)
    assert np.all(lo.c <= hi.c + 1e-8)


@settings(max_examples=15)
@given(seeds, st.sampled_from([0.3, 0.8]))
def test_lift_of_optimum_changes_nothing(seed, lam):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3)
    Z = random_deflator(tree, rng)
    sol = solve_primal_tree(tree, Z, LOG, 2.0, 0.2, lam)
    lifted = solid_hull_lift(tree.to_panel(sol.c), lam, 0.2).values
    assert np.max(np.abs(lifted - sol.c[tree.paths])) <= 1e-8


def test_value_surface_worked_tree():
    tree, Z = worked_tree()
    vs = value_surface(tree, Z, LOG, [5.0, 6.0, 7.0, 8.0], [-1.0, 0.0, 1.0, 2.0], 1.0)
    assert math.isclose(vs["u"][2, 1], math.log(3) + 0.5 * math.log(21), rel_tol=1e-9)
    # q <= 0 columns coincide
    assert np.allclose(vs["u"][:, 0], vs["u"][:, 1], atol=1e-9)
    assert np.all(np.diff(vs["u"], axis=0) > 0)
    assert vs["concavity_violation"] <= 1e-8
    assert vs["in_Lstar"] and vs["fd_in_Lstar"]
    assert vs["conjugacy_residual"] <= 1e-6


def test_utility_inverse_and_conjugate():
    for u in (Utility.log(), Utility(2.0), Utility(0.5, 0.1, 0.03)):
        y = np.geomspace(1e-4, 1e4, 50)
        assert np.max(np.abs(u.du(u.inv(y)) - y) / y) <= 1e-10
        h = 1e-6 * y
        dv = (u.conj(y + h) - u.conj(y - h)) / (2 * h)
        assert np.max(np.abs(dv + u.inv(y)) / u.inv(y)) <= 1e-5
