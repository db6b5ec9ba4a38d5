import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratchetlab.complete import (KernelSpec, I_quadrature, budget_match_riedel, drawdown_formula_check,
                                 estimate_I, floor_lift_and_price, kernel_at, martingale_check,
                                 match_floor_budget, price_map, riedel_floor_price, riedel_plan,
                                 simulate_kernel, truncation_horizon)
from ratchetlab.esssup import running_esssup_interior
from ratchetlab.grid import pairing
from ratchetlab.primal import InfeasibleError, solve_primal_tree
from ratchetlab.tree import alpha, random_deflator, random_tree, worked_tree
from ratchetlab.utility import Utility

LOG = Utility.log()
GBM = KernelSpec(theta=0.4, r=0.05, delta_pref=0.1, seed=3)


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(jump_intensity=-0.1)
    with pytest.raises(ValueError):
        KernelSpec(dt=0.0)
    with pytest.raises(ValueError):
        KernelSpec(jump_intensity=0.1, jump_dist="exponential", jump_mean=1.0, jump_sign=1.0)
    KernelSpec(theta=-0.3)  # either sign of theta is accepted


def test_constant_kernel_is_exactly_one():
    Z = simulate_kernel(KernelSpec(theta=0.0), 5, horizon=2.0)
    assert np.all(Z.values == 1.0)


def test_simulation_needs_finite_horizon():
    with pytest.raises(ValueError):
        simulate_kernel(KernelSpec(theta=0.2), 3)


def test_reproducible_and_prefix_stable():
    a = kernel_at(GBM, 50, [1.0, 2.0])
    b = kernel_at(GBM, 80, [1.0, 2.0])
    assert np.array_equal(a, b[:50])
    c = kernel_at(KernelSpec(theta=0.4, seed=4), 50, [1.0])
    assert not np.array_equal(a[:, :1], c)


def test_gbm_martingale():
    res = martingale_check(KernelSpec(theta=0.4, seed=1), 100_000, (1.0, 5.0))
    assert res["ok"], res


def test_exponential_jump_martingale():
    spec = KernelSpec(theta=0.0, jump_intensity=0.1, jump_dist="exponential", jump_mean=1.0, seed=2)
    res = martingale_check(spec, 100_000, (1.0, 5.0))
    assert res["ok"], res


def test_normal_jump_martingale():
    spec = KernelSpec(theta=0.2, jump_intensity=0.5, jump_mean=-0.1, jump_std=0.2, seed=5)
    assert martingale_check(spec, 50_000, (1.0, 3.0))["ok"]


def test_gbm_log_moments():
    Z = kernel_at(KernelSpec(theta=0.4, seed=9), 40_000, [2.0])[:, 0]
    lz = np.log(Z)
    # log Z_2 ~ N(-0.16, 0.32)
    assert abs(lz.mean() + 0.16) <= 4 * math.sqrt(0.32 / lz.size)
    assert abs(lz.var() - 0.32) <= 0.02


def test_I_equal_rates():
    spec = KernelSpec(theta=0.0, r=0.1, delta_pref=0.1, trunc_tol=1e-12)
    I, se, info = estimate_I(spec, 3)
    assert se == 0.0
    assert abs(I - 10.0) <= 10.0 * 1e-12 + info["truncation_bound"]


def test_I_deterministic_matches_quadrature():
    spec = KernelSpec(theta=0.0, r=0.05, delta_pref=0.1)
    I, _, info = estimate_I(spec, 3)
    assert math.isclose(I, I_quadrature(spec, info["t_max"]), rel_tol=1e-13)
    # the running inf of an increasing exponential is 1, so I = 1/delta up to truncation
    assert 0 <= 10.0 - I <= info["truncation_bound"] * (1 + 1e-9)


def test_truncation_policy():
    spec = KernelSpec(theta=0.0, r=0.05, delta_pref=0.1)
    T = truncation_horizon(spec, 10.0)
    assert math.isclose(math.exp(-0.1 * T) / 0.1, 1e-4 * 10.0, rel_tol=1e-12)


def test_perpetuity_plan():
    spec = KernelSpec(theta=0.0, r=0.05, delta_pref=0.05, trunc_tol=1e-12)
    u = Utility.log(0.05, 0.05)
    y = 0.4
    plan = riedel_plan(spec, u, y, 2, store=2)
    assert math.isclose(plan.K, y, rel_tol=1e-9)
    assert np.allclose(plan.stored["c"], 1 / y, rtol=1e-9)
    matched = budget_match_riedel(spec, u, 10.0, 2, store=2)
    assert math.isclose(matched.y, 1 / (10.0 * 0.05), rel_tol=1e-9)
    assert np.max(np.abs(matched.stored["c"] - 0.5)) <= 1e-9


def test_riedel_requires_positive_rate():
    with pytest.raises(ValueError):
        riedel_plan(KernelSpec(theta=0.2, r=0.0, delta_pref=0.1), LOG, 1.0, 2)


def test_small_gbm_plan_properties():
    spec = KernelSpec(theta=0.4, r=0.05, delta_pref=0.1, seed=11)
    u = Utility.log(0.1, 0.05)
    plan = budget_match_riedel(spec, u, 10.0, 400, store=6)
    assert abs(plan.budget - 10.0) <= max(1e-3 * 10.0, 2 * plan.budget_se)
    assert plan.monotone_violations == 0
    assert np.all(np.diff(plan.stored["c"], axis=1) >= 0)
    assert plan.envelope_inequality <= 1e-10 and plan.envelope_equality <= 1e-10
    # the first cell carries i(K)
    assert np.allclose(plan.stored["c"][:, 0], 1.0 / plan.K)
    # reproducible to the bit
    again = budget_match_riedel(spec, u, 10.0, 400, store=6)
    assert again.budget == plan.budget and again.y == plan.y


def test_gbm_I_standard_error_small():
    spec = KernelSpec(theta=0.4, r=0.05, delta_pref=0.1, seed=11)
    I, se, _ = estimate_I(spec, 400)
    assert 0 < I < 10.0 and se <= 0.05 * I


def test_crra_plan_and_monotone_in_budget():
    spec = KernelSpec(theta=0.3, r=0.04, delta_pref=0.08, seed=12)
    u = Utility(2.0, 0.08, 0.04)
    a = budget_match_riedel(spec, u, 5.0, 200, store=4)
    b = budget_match_riedel(spec, u, 5.5, 200, store=4)
    assert np.all(a.stored["c"] <= b.stored["c"])


def test_floor_price_is_above_plain_price():
    spec = KernelSpec(theta=0.4, r=0.05, delta_pref=0.1, seed=11)
    u = Utility.log(0.1, 0.05)
    plan = budget_match_riedel(spec, u, 10.0, 400, store=0)
    p0, _ = riedel_floor_price(spec, u, plan.y, 0.0, 400)
    p1, _ = riedel_floor_price(spec, u, plan.y, 0.6, 400)
    assert math.isclose(p0, plan.budget, rel_tol=1e-12)
    assert p1 >= p0


# -- three regimes ----------------------------------------------------------
def test_drawdown_formula_on_worked_tree():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 7.0)
    rep = drawdown_formula_check(tree.to_panel(sol.c), sol.y, tree.to_panel(Z), 1.0, LOG)
    assert rep["max_residual"] <= 1e-8


def test_drawdown_formula_unconstrained():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 7.0, lam=0.0)
    rep = drawdown_formula_check(tree.to_panel(sol.c), sol.y, tree.to_panel(Z), 0.0, LOG)
    assert rep["max_residual"] <= 1e-8
    assert set(rep["labels"].ravel()) == {"unconstrained"}


def test_drawdown_formula_detects_perturbation():
    tree, Z = worked_tree()
    sol = solve_primal_tree(tree, Z, LOG, 7.0, lam=0.5)
    c = tree.to_panel(sol.c)
    bad = c.values.copy()
    bad[1, 1] += 0.3
    rep = drawdown_formula_check(c.like(bad), sol.y, tree.to_panel(Z), 0.5, LOG)
    assert rep["residual"][1, 1] > 0.1
    assert rep["residual"][0].max() <= 1e-8


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.7, 1.0]))
def test_regimes_partition(seed, lam):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3)
    Z = random_deflator(tree, rng)
    sol = solve_primal_tree(tree, Z, LOG, 3.0, 0.0, lam)
    rep = drawdown_formula_check(tree.to_panel(sol.c), sol.y, tree.to_panel(Z), lam, LOG, tol=1e-6)
    assert rep["max_residual"] <= 1e-6
    cbar = running_esssup_interior(tree.to_panel(sol.c)).values
    c = sol.c[tree.paths]
    lab = rep["labels"]
    assert np.all(np.abs(c - lam * cbar)[lab == "min"] <= 1e-6)
    assert np.all(np.abs(c - cbar)[lab == "max"] <= 1e-6)


# -- q-floor ----------------------------------------------------------------
def test_floor_lift_fixed_point():
    tree, Z = worked_tree()
    c, pi = floor_lift_and_price(np.array([3.0, 3.0, 7.0]), 3.0, 1.0, 2 / 7, Z, LOG, tree)
    assert c.tolist() == [3.0, 3.0, 7.0] and pi == 7.0


def test_floor_above_plan():
    tree, Z = worked_tree()
    c, pi = floor_lift_and_price(np.array([3.0, 3.0, 7.0]), 9.0, 1.0, 2 / 7, Z, LOG, tree)
    assert np.all(c == 9.0) and pi == 9.0 * alpha(tree, Z)


def test_floor_lift_on_panels():
    tree, Z = worked_tree()
    P, Zp = tree.to_panel(np.array([3.0, 3.0, 7.0])), tree.to_panel(Z)
    c, pi = floor_lift_and_price(P, 4.0, 1.0, 2 / 7, Zp, LOG, Zp)
    assert pi == pytest.approx(pairing(c, Zp))
    assert np.all(c.values >= 4.0)


def test_price_map_limit_half_lambda():
    tree, Z = worked_tree()
    q, lam = 3.0, 0.5
    xs = np.geomspace(1e-6, 7.0, 20)
    pis = price_map(tree, Z, LOG, xs, q, lam)
    assert np.all(np.diff(pis) >= -1e-12)
    assert abs(pis[0] - alpha(tree, Z) * lam * q) <= 1e-4


def test_match_floor_fixed_point():
    tree, Z = worked_tree()
    m = match_floor_budget(7.0, 3.0, 1.0, tree, Z, LOG)
    assert abs(m["x"] - 7.0) <= 1e-6 * 7.0
    assert np.allclose(m["c"], [3, 3, 7])


def test_match_floor_infeasible():
    tree, Z = worked_tree()
    with pytest.raises(InfeasibleError):
        match_floor_budget(6.0, 3.0, 1.0, tree, Z, LOG)


@pytest.mark.parametrize("lam", [0.5, 1.0])
def test_match_floor_near_boundary(lam):
    tree, Z = worked_tree()
    q = 3.0
    edge = alpha(tree, Z) * lam * q
    m = match_floor_budget(edge * (1 + 1e-7), q, lam, tree, Z, LOG)
    assert np.max(np.abs(m["c"] - lam * q)) <= 1e-4 * q


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.7, 1.0]))
def test_match_floor_equals_direct_solve(seed, lam):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3)
    Z = random_deflator(tree, rng)
    u = Utility(2.0, 0.1, 0.05)
    q = 1.0
    x = alpha(tree, Z) * lam * q + 1.0
    m = match_floor_budget(x, q, lam, tree, Z, u)
    direct = solve_primal_tree(tree, Z, u, x, q, lam)
    assert abs(m["utility"] - direct.u_hat) <= 1e-6
