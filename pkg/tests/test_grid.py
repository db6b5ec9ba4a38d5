import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ratchetlab.grid import (Clock, IncreasingPath, PathPanel, StructureError, TimeGrid, alpha_bound,
                             ibp_check, pairing, stieltjes_pair)
from ratchetlab.tree import worked_tree


def panel(vals, edges=None, clock=None):
    vals = np.atleast_2d(np.asarray(vals, float))
    g = TimeGrid(np.asarray(edges, float)) if edges is not None else TimeGrid.uniform(vals.shape[1], 1.0)
    return PathPanel(vals, g, clock(g) if clock else Clock.lebesgue(g))


def test_grid_rejects_non_increasing_edges():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 1.0, 1.0]))


def test_clock_rejects_non_positive_density():
    g = TimeGrid.uniform(3, 1.0)
    with pytest.raises(ValueError):
        Clock.from_density(g, [1.0, 0.0, 1.0])


def test_clock_rejects_bound_violation():
    g = TimeGrid.uniform(3, 1.0)
    with pytest.raises(ValueError):
        Clock.from_density(g, [1.0, 1.0, 1.0], bound=2.0)


def test_pairing_of_constants():
    assert pairing(panel([[2.0]]), panel([[3.0]])) == 6.0


def test_pairing_zero_annihilates():
    d = panel([[1.0, 4.0, 2.0]])
    assert pairing(d.like(0.0), d) == 0.0


def test_pairing_shape_mismatch():
    with pytest.raises(StructureError):
        pairing(panel([[1.0, 2.0]]), panel([[1.0, 2.0, 3.0]]))


def test_worked_tree_pairing_of_optimum_and_dual():
    tree, Z = worked_tree()
    c = np.array([3.0, 3.0, 7.0])
    P = tree.to_panel(c)
    D = tree.to_panel(1.0 / c)
    assert math.isclose(pairing(P, D), 2.0, rel_tol=1e-14)


def test_alpha_exponential_clock():
    g = TimeGrid.uniform(4000, 0.01, truncated=True)
    Z = PathPanel(np.ones((1, 4000)), g, Clock.exponential(g, 2.0))
    # truncation error is exp(-2*40)/2
    assert abs(alpha_bound(Z) - 0.5) <= 1e-12


def test_alpha_lebesgue_unit_interval():
    assert alpha_bound(panel([[1.0]])) == 1.0


def test_alpha_worked_tree():
    tree, Z = worked_tree()
    assert alpha_bound(tree.to_panel(Z)) == 2.0


def test_tail_mass_of_exponential_clock():
    g = TimeGrid.uniform(10, 0.5, truncated=True)
    ck = Clock.exponential(g, 1.0)
    assert math.isclose(ck.tail_mass(), math.exp(-5.0), rel_tol=1e-12)


def test_increasing_path_left_continuous():
    p = IncreasingPath(np.array([0.5]), np.array([2.0]))
    assert p(0.5) == 0.0
    assert p(0.5 + 1e-12) == 2.0
    assert p(0.0) == 0.0


def test_stieltjes_single_jump():
    D = panel([[1.0, 1.0]])
    assert stieltjes_pair(D, [IncreasingPath(np.array([0.5]), np.array([5.0]))]) == 5.0


def test_stieltjes_zero_integrand():
    D = panel([[0.0, 0.0]])
    assert stieltjes_pair(D, [IncreasingPath(np.array([0.5]), np.array([5.0]))]) == 0.0


def test_stieltjes_dense_linear_path():
    n = 4000
    g = TimeGrid.uniform(n, 1.0 / n)
    D = PathPanel((1.0 - g.left)[None, :], g, Clock.lebesgue(g))
    knots = g.left[1:]
    path = IncreasingPath(knots, knots)
    # Riemann sum of (1 - s) ds; error O(1/n)
    assert abs(stieltjes_pair(D, [path]) - 0.5) <= 1.0 / n


def test_ibp_linear_case():
    n = 2000
    g = TimeGrid.uniform(n, 1.0 / n)
    f = PathPanel(np.ones((1, n)), g, Clock.lebesgue(g))
    path = IncreasingPath(g.left[1:], g.left[1:])
    assert ibp_check(f, [path]) <= 1e-10


def test_ibp_constant_zero_path():
    f = panel([[1.0, 2.0, 3.0]])
    assert ibp_check(f, [IncreasingPath(np.array([]), np.array([]))]) == 0.0


@given(st.integers(0, 2**32 - 1))
def test_ibp_random_steps(seed):
    rng = np.random.default_rng(seed)
    n = 16
    edges = np.r_[0.0, np.cumsum(rng.uniform(0.1, 1.0, n))]
    g = TimeGrid(edges)
    f = PathPanel(rng.uniform(0, 3, (2, n)), g, Clock.from_density(g, rng.uniform(0.5, 2.0, (2, n))),
                  np.array([0.3, 0.7]))
    paths = []
    for _ in range(2):
        k = rng.integers(0, 6)
        knots = np.sort(rng.uniform(0, edges[-1], k))
        paths.append(IncreasingPath(knots, np.cumsum(rng.uniform(0, 2, k))))
    assert ibp_check(f, paths) <= 1e-10
    assert ibp_check(f, paths, clock=True) <= 1e-10


@given(st.lists(st.floats(0, 10), min_size=3, max_size=3), st.lists(st.floats(0, 10), min_size=3, max_size=3))
def test_pairing_symmetric(a, b):
    A, B = panel([a]), panel([b])
    assert pairing(A, B) == pairing(B, A)


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.lists(st.floats(0, 5), min_size=4, max_size=4),
       st.lists(st.floats(0, 10), min_size=4, max_size=4))
def test_pairing_monotone(c1, extra, d):
    C1 = panel([c1])
    C2 = C1.like(C1.values + np.asarray(extra))
    D = panel([d])
    assert pairing(C1, D) <= pairing(C2, D)
