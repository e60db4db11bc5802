"""Finite-difference solver: monotonicity, projection, truncation, 2-d."""

from __future__ import annotations

import numpy as np
import pytest

from ctrlstop.hamilton import TruncationIndex
from ctrlstop.model import build_builtin
from ctrlstop.pde import (
    SpaceTimeGrid,
    comparison_check,
    extract_policy,
    ladder,
    make_grid,
    rerun_projection,
    solve,
)

CLOSED_FORM_ATM_PUT = 0.0797884560802865  # sigma sqrt(T / (2 pi)) at K = x0


def _custom(**over):
    base = {
        "dim": 1,
        "T": 1.0,
        "sigma": ["0.2"],
        "f": ["0"],
        "gamma": "0",
        "g": "x1",
        "h": "-1000000000",
        "controls": [[0.0]],
        "growth": {"C_f": 0.0, "C_sigma_inv": 5.0, "C_poly": 1e9, "p": 1.0},
        "lo": -6.0,
        "hi": 6.0,
    }
    base.update(over)
    return build_builtin("custom", base)


def test_linear_function_is_invariant_in_the_core():
    spec = _custom()
    grid = make_grid(spec, 121)
    field = solve(spec, grid)
    core = grid.core_mask()
    x = grid.nodes()[:, 0].reshape(grid.shape)
    err = np.abs(field.values[0] - x)[core]
    assert np.max(err) < 1e-8


def test_terminal_slice_is_exact():
    spec = build_builtin("decaying_obstacle")
    grid = make_grid(spec, 101)
    field = solve(spec, grid)
    assert np.array_equal(field.values[-1], spec.g(grid.nodes()).reshape(grid.shape))


def test_solution_never_falls_below_the_obstacle():
    spec = build_builtin("decaying_obstacle", {"beta": 2.0})
    grid = make_grid(spec, 101)
    field = solve(spec, grid)
    _, h_all = rerun_projection(spec, field)
    assert float(np.min(field.values - h_all)) >= 0.0


def test_projection_pins_binding_nodes_to_the_obstacle():
    spec = build_builtin("decaying_obstacle", {"beta": 2.0})
    grid = make_grid(spec, 101)
    field = solve(spec, grid)
    vtilde, h_all = rerun_projection(spec, field)
    binding = vtilde < h_all[:-1]
    assert np.count_nonzero(binding) > 0
    assert np.array_equal(field.values[:-1][binding], h_all[:-1][binding])


def test_bachelier_value_near_closed_form():
    spec = build_builtin("bachelier_put")
    grid = make_grid(spec, 201)
    field = solve(spec, grid)
    v0 = field.at(0.0, [1.0])
    assert abs(v0 - CLOSED_FORM_ATM_PUT) / CLOSED_FORM_ATM_PUT < 2e-3
    assert field.scheme_meta["cfl_ratio"] <= 0.95


def test_put_without_decay_never_stops_early():
    spec = build_builtin("bachelier_put")
    field = solve(spec, make_grid(spec, 101))
    policy = extract_policy(spec, field)
    # interior nodes never bind; the replicated-edge boundary column may
    assert not np.any(policy.stop_mask[:-1][:, 1:-1])
    assert not bool(policy.stop_at(0.0, np.array([[1.0]]))[0])
    assert np.all(policy.stop_mask[-1])


def test_decaying_obstacle_stops_deep_in_the_money():
    spec = build_builtin("decaying_obstacle", {"beta": 2.0})
    field = solve(spec, make_grid(spec, 161))
    policy = extract_policy(spec, field)
    assert np.any(policy.stop_mask[0])
    assert bool(policy.stop_at(0.0, np.array([[-2.0]]))[0])
    assert not bool(policy.stop_at(0.0, np.array([[4.5]]))[0])


def test_extracted_control_pushes_away_from_the_origin():
    spec = build_builtin("controlled_drift_abs")
    field = solve(spec, make_grid(spec, 81))
    policy = extract_policy(spec, field)
    idx = policy.control_indices(0.0, np.array([[2.0], [-2.0]]))
    assert idx[0] == 2 and idx[1] == 0  # +kappa right of 0, -kappa left
    assert policy.control_points.shape == (3, 1)


def test_truncation_ladder_is_monotone_and_exhausts():
    spec = build_builtin("controlled_drift_abs")
    grid = make_grid(spec, 81)
    report = ladder(spec, grid, n_list=(1, 2, 5), m_list=(1, 5))
    assert report.monotone
    assert report.violation_n == 0.0 and report.violation_m == 0.0
    # radius-5 cutoffs cover the [-4, 4] box entirely: bitwise recovery
    assert report.exhaustion_gap == 0.0
    # the tight cutoff visibly bites inside the reporting core
    assert report.sup_gap_core[(1, 1)] > 1e-6
    assert report.sup_gap_core[(5, 5)] == 0.0


def test_truncation_identity_holds_inside_the_radius():
    spec = build_builtin("controlled_drift_abs")
    grid = make_grid(spec, 81)
    base = solve(spec, grid)
    damped = solve(spec, grid, trunc=TruncationIndex(2, 2))
    x = grid.nodes()[:, 0]
    inside = np.abs(x) <= 2.0
    # one step from the terminal slice the damping has not yet propagated
    assert np.array_equal(
        damped.values[grid.nt - 1][inside], base.values[grid.nt - 1][inside]
    )
    assert not np.array_equal(damped.values[0], base.values[0])


def test_two_dimensional_solution_has_problem_symmetries():
    spec = build_builtin("controlled_drift_abs", {"d": 2})
    grid = make_grid(spec, 31)
    field = solve(spec, grid)
    for i in (0, grid.nt // 2):
        v = field.values[i]
        # axis exchange is bitwise; point reflection is not, because
        # linspace nodes are not exactly sign-symmetric
        assert np.array_equal(v, v.T)
        assert np.max(np.abs(v - v[::-1, ::-1])) <= 1e-13


def test_two_dimensional_cross_terms_preserve_linear_functions():
    spec = _custom(
        dim=2,
        sigma=["0.3", "0.15", "0.15", "0.3"],
        f=["0", "0"],
        g="x1+x2",
        controls=[[0.0, 0.0]],
        lo=-8.0,
        hi=8.0,
    )
    grid = make_grid(spec, 41)
    field = solve(spec, grid)
    core = grid.core_mask()
    nodes = grid.nodes()
    target = (nodes[:, 0] + nodes[:, 1]).reshape(grid.shape)
    assert np.max(np.abs(field.values[0] - target)[core]) < 1e-8


def test_cross_stencil_requires_diagonal_dominance():
    spec = _custom(
        dim=2,
        sigma=["1", "0", "2", "0.1"],
        f=["0", "0"],
        g="0",
        controls=[[0.0, 0.0]],
        lo=-2.0,
        hi=2.0,
    )
    grid = SpaceTimeGrid(box=spec.domain, nx=(21, 21), nt=400, horizon_T=1.0)
    with pytest.raises(ValueError, match="diagonally dominant"):
        solve(spec, grid)


def test_dimension_and_generator_guards():
    spec3 = _custom(
        dim=3,
        sigma=[str(float(i == j)) for i in range(3) for j in range(3)],
        f=["0", "0", "0"],
        g="0",
        controls=[[0.0, 0.0, 0.0]],
        lo=-2.0,
        hi=2.0,
    )
    grid3 = SpaceTimeGrid(box=spec3.domain, nx=(5, 5, 5), nt=50, horizon_T=1.0)
    with pytest.raises(ValueError, match="d <= 2 only"):
        solve(spec3, grid3)
    spec1 = build_builtin("bachelier_put")
    with pytest.raises(ValueError, match="generator must be one of"):
        solve(spec1, make_grid(spec1, 51), generator="bogus")
    with pytest.raises(ValueError, match="grid dimension"):
        solve(spec1, grid3)


def test_cfl_violation_is_reported():
    spec = build_builtin("bachelier_put")
    grid = SpaceTimeGrid(box=spec.domain, nx=(101,), nt=1, horizon_T=1.0)
    with pytest.raises(ValueError, match="CFL violation"):
        solve(spec, grid)


def test_dominating_generator_needs_diagonal_sigma():
    spec = _custom(
        dim=2,
        sigma=["1", "0.5", "0.5", "1"],
        f=["0", "0"],
        g="0",
        controls=[[0.0, 0.0]],
        lo=-2.0,
        hi=2.0,
        growth={"C_f": 0.0, "C_sigma_inv": 2.0, "C_poly": 1.0, "p": 1.0},
    )
    grid = SpaceTimeGrid(box=spec.domain, nx=(15, 15), nt=600, horizon_T=1.0)
    with pytest.raises(ValueError, match="diagonal sigma"):
        solve(spec, grid, generator="dominating")


def test_dominating_generator_bounds_the_value_on_the_same_grid():
    spec = build_builtin("bachelier_put")
    grid = make_grid(spec, 81, generator="dominating")
    v_phi = solve(spec, grid, generator="dominating").values
    v_h = solve(spec, grid).values
    assert float(np.min(v_phi - v_h)) >= -1e-10


def test_comparison_check_detects_order_both_ways():
    spec = build_builtin("decaying_obstacle")
    grid = make_grid(spec, 61)

    def bump(X):
        return 0.25 * np.exp(-X[:, 0] ** 2)

    low = (lambda X: spec.g(X), lambda t, X: spec.h(t, X))
    high = (
        lambda X: spec.g(X) + bump(X),
        lambda t, X: spec.h(t, X) + bump(X),
    )
    ordered = comparison_check(spec, grid, [(low, high)])
    assert ordered["passed"]
    assert ordered["max_violation"] <= 1e-10
    reversed_ = comparison_check(spec, grid, [(high, low)])
    assert not reversed_["passed"]
    assert reversed_["max_violation"] > 0.1


def test_grid_construction_and_lookup():
    spec = build_builtin("bachelier_put")
    grid = make_grid(spec, 51, nt=777)
    assert grid.nt == 777
    assert grid.nx == (51,)
    assert grid.index_of([99.0]) == (50,)
    assert grid.index_of([-99.0]) == (0,)
    field = solve(spec, make_grid(spec, 51))
    assert field.at(1.0, [1.0]) == 0.0  # terminal payoff at the strike
    with pytest.raises(ValueError, match="at least 3 nodes"):
        SpaceTimeGrid(box=spec.domain, nx=(2,), nt=10, horizon_T=1.0)
    with pytest.raises(ValueError, match="one node count per axis"):
        SpaceTimeGrid(box=spec.domain, nx=(5, 5), nt=10, horizon_T=1.0)
