import dataclasses

import numpy as np
import pytest

from multiscale_hjb.homogenize import effective_tables_for, sc_minimum
from multiscale_hjb.hjb import (PolicyField, ValueField1D, check_neumann, convergence_study,
                                markov_policy_from_value, minimize_hamiltonian_grid, minimize_quadratic_control,
                                solve_effective_hjb, solve_multiscale_hjb, sup_running_cost)
from multiscale_hjb.model import ControlBox, build_example
from multiscale_hjb.torus import TorusGrid

from conftest import make_cfg

BOX = ControlBox(np.array([0.0]), np.array([1.0]))


def test_quadratic_interior_minimum():
    theta_d = 0.3
    u, val = minimize_quadratic_control(2 * theta_d, BOX)
    assert u == pytest.approx(theta_d) and val == pytest.approx(-theta_d**2)


def test_quadratic_clamped():
    assert minimize_quadratic_control(5.0, BOX)[0] == 1.0
    assert minimize_quadratic_control(-5.0, BOX)[0] == 0.0


def test_quadratic_vs_bruteforce(rng):
    us = BOX.grid(100_001)
    du = us[1] - us[0]
    f = rng.normal(scale=3, size=200)
    _, val = minimize_quadratic_control(f, BOX)
    brute = np.min(us[None, :] ** 2 - f[:, None] * us[None, :], axis=1)
    assert np.all(brute >= val - 1e-15)
    assert np.max(brute - val) <= du**2


@pytest.mark.parametrize("example", [1, 2])
def test_grid_minimizer_matches_closed_form(example, rng):
    cfg = make_cfg(example)
    slow, _ = build_example(cfg)
    x, g, H = rng.uniform(-1, 1, 100), rng.normal(scale=2, size=100), rng.normal(scale=2, size=100)
    n_u = 2001
    du = 1.0 / (n_u - 1)
    _, grid_val = minimize_hamiltonian_grid(x, g, H, slow, cfg.control, n_u)
    exact = sc_minimum(x, g, H, slow, cfg.control)
    assert np.all(grid_val >= exact - 1e-14)
    assert np.max(grid_val - exact) <= du**2


def test_grid_minimizer_with_fast_point(ex1, cfg1):
    slow, _ = ex1
    y = np.array([0.25, 0.25])
    _, with_y = minimize_hamiltonian_grid(0.5, 1.0, 2.0, slow, cfg1.control, 101, y=y)
    _, without = minimize_hamiltonian_grid(0.5, 1.0, 2.0, slow, cfg1.control, 101)
    assert with_y - without == pytest.approx(0.5 * 1.0 + 0.5 * (0.3 * 0.5) ** 2 * 2.0)


def test_grid_minimizer_constant_integrand():
    cfg = make_cfg(1, theta_b=0.0)
    slow, _ = build_example(cfg)
    slow = dataclasses.replace(slow, l_sc=lambda x, u: 0.7 + 0.0 * np.asarray(u))
    _, val = minimize_hamiltonian_grid(0.2, 3.0, 1.0, slow, cfg.control, 11)
    assert val == pytest.approx(0.7)


def _decoupled(c, **extra):
    cfg = make_cfg(1, theta_a=0.0, theta_b=0.0, theta_c=0.0, theta_e=0.0, **extra)
    slow, fast = build_example(cfg)
    return cfg, slow.with_cost_shift(c), fast


def test_effective_constant_cost():
    cfg, slow, fast = _decoupled(0.3, beta=2.0)
    tables = effective_tables_for(slow, fast, 33, TorusGrid(2, 8))
    v = solve_effective_hjb(tables, slow, cfg.control, cfg.beta)
    assert np.max(np.abs(v.v - 0.15)) <= 1e-8


def test_effective_zero_cost():
    cfg, slow, fast = _decoupled(0.0, theta_d=0.5)
    tables = effective_tables_for(slow, fast, 17, TorusGrid(2, 8))
    v = solve_effective_hjb(tables, slow, cfg.control, cfg.beta)
    assert np.max(np.abs(v.v)) <= 1e-12
    np.testing.assert_allclose(v.policy.values, 0.5)


def test_multiscale_constant_cost():
    cfg, slow, fast = _decoupled(0.2)
    f = solve_multiscale_hjb(slow, fast, cfg.control, 0.2, cfg.beta, 17, TorusGrid(2, 8))
    assert np.max(np.abs(f.v - 0.2)) <= 1e-8


def test_multiscale_y_independent_without_theta_a():
    cfg = make_cfg(1, theta_a=0.0)
    slow, fast = build_example(cfg)
    f = solve_multiscale_hjb(slow, fast, cfg.control, 0.2, cfg.beta, 17, TorusGrid(2, 8), tol=1e-10)
    spread = np.max(np.ptp(f.v.reshape(17, -1), axis=1))
    assert spread <= 10 * 1e-10


def test_effective_solution_properties(cfg1, ex1):
    slow, fast = ex1
    tables = effective_tables_for(slow, fast, 33, TorusGrid(2, 16))
    v = solve_effective_hjb(tables, slow, cfg1.control, cfg1.beta)
    assert v.residual <= 1e-10
    assert np.all((v.policy.values >= 0) & (v.policy.values <= 1))
    assert v.iterations < 200
    # the state constraint is costly at both ends: value grows towards the boundary
    assert v.v[0] > v.v[16] and v.v[-1] > v.v[16]


def test_policy_improvement_consistent_with_markov_policy(cfg1, ex1):
    slow, fast = ex1
    tables = effective_tables_for(slow, fast, 65, TorusGrid(2, 16))
    v = solve_effective_hjb(tables, slow, cfg1.control, cfg1.beta)
    pol = markov_policy_from_value(v, slow, cfg1.control)
    d = np.diff(v.v) / v.dx
    # solver uses one-sided quotients, the Markov policy the central one
    bound = cfg1.theta_b / 2 * np.abs(np.diff(d)) + 1e-12
    assert np.all(np.abs(pol.values[1:-1] - v.policy.values[1:-1]) <= bound)


def test_markov_policy_const_value(cfg1, ex1):
    slow, _ = ex1
    x = np.linspace(-1, 1, 11)
    v = ValueField1D(x, np.full(11, 3.0), PolicyField(np.zeros(11), cfg1.control), 1.0, 0.0)
    np.testing.assert_allclose(markov_policy_from_value(v, slow, cfg1.control).values, cfg1.theta_d)


def test_markov_policy_linear_value():
    cfg = make_cfg(1, theta_b=2.0, theta_d=0.0, u_hi=2.0)
    slow, _ = build_example(cfg)
    x = np.linspace(-1, 1, 11)
    v = ValueField1D(x, x.copy(), PolicyField(np.zeros(11), cfg.control), 1.0, 0.0)
    np.testing.assert_allclose(markov_policy_from_value(v, slow, cfg.control).values, 1.0)
    cfg = make_cfg(1, theta_b=2.0, theta_d=0.0, u_hi=0.5)
    np.testing.assert_allclose(markov_policy_from_value(v, slow, cfg.control).values, 0.5)


def test_markov_policy_3d(cfg1, ex1):
    slow, fast = ex1
    f = solve_multiscale_hjb(slow, fast, cfg1.control, 0.2, 1.0, 17, TorusGrid(2, 8))
    pol = markov_policy_from_value(f, slow, cfg1.control)
    assert pol.values.shape == f.v.shape
    assert np.all((pol.values >= 0) & (pol.values <= 1))


def test_check_neumann_synthetic():
    x = np.linspace(-1, 1, 21)
    box = BOX
    const = ValueField1D(x, np.full(21, 2.0), PolicyField(np.zeros(21), box), 1.0, 0.0)
    assert check_neumann(const, 0.0) == 0.0
    # v = theta_e * x has slope +theta_e at both ends, so only h_minus = -theta_e fits
    theta_e = 0.37
    lin = ValueField1D(x, theta_e * x, PolicyField(np.zeros(21), box), 1.0, 0.0)
    assert check_neumann(lin, -theta_e, theta_e) <= 1e-14
    sym = ValueField1D(x, theta_e * np.abs(x), PolicyField(np.zeros(21), box), 1.0, 0.0)
    assert check_neumann(sym, theta_e) <= 1e-14


def test_neumann_residual_decreases(cfg1, ex1):
    slow, fast = ex1
    res = []
    for n in (33, 65):
        tables = effective_tables_for(slow, fast, n, TorusGrid(2, 16))
        res.append(check_neumann(solve_effective_hjb(tables, slow, cfg1.control, 1.0), 0.1))
    assert res[1] <= 0.6 * res[0]


def test_cost_shift_exact_control_independent():
    cfg = make_cfg(1)
    slow, fast = build_example(cfg)
    slow = dataclasses.replace(slow, l_sc=lambda x, u: 0.0 * np.asarray(u) + 0.0 * np.asarray(x), quadratic=None)
    tables = effective_tables_for(slow, fast, 17, TorusGrid(2, 8))
    base = solve_effective_hjb(tables, slow, cfg.control, 1.5, n_control=11)
    shifted = slow.with_cost_shift(0.1)
    tables2 = effective_tables_for(shifted, fast, 17, TorusGrid(2, 8))
    up = solve_effective_hjb(tables2, shifted, cfg.control, 1.5, n_control=11)
    assert np.max(np.abs(up.v - base.v - 0.1 / 1.5)) <= 1e-8


def test_equibounded_small():
    cfg = make_cfg(1, theta_e=0.0)
    slow, fast = build_example(cfg)
    bound = sup_running_cost(slow, cfg.control) / cfg.beta
    for eps in (0.4, 0.1):
        f = solve_multiscale_hjb(slow, fast, cfg.control, eps, cfg.beta, 17, TorusGrid(2, 8))
        assert np.max(np.abs(f.v)) <= bound + 1e-8


def test_convergence_study_small():
    cfg = make_cfg(1, n_slow=17, n_torus=8)
    rows, vbar, fields = convergence_study(cfg)
    assert [r.epsilon for r in rows] == [0.4, 0.2, 0.1, 0.05]
    assert len(fields) == 4 and vbar.v.shape == (17,)
    for r in rows:
        assert r.err_inf <= r.err_sup + 2e-10
    sup = [r.err_sup for r in rows]
    assert all(a > b for a, b in zip(sup, sup[1:]))


def test_convergence_study_decoupled():
    cfg = make_cfg(1, theta_a=0.0, theta_b=0.0, theta_c=0.0, theta_e=0.0, n_slow=9, n_torus=8)
    slow, fast = build_example(cfg)
    slow = slow.with_cost_shift(0.4)
    rows, _, _ = convergence_study(cfg, slow=slow, fast=fast)
    for r in rows:
        assert r.err_inf <= 1e-8 and r.err_sup <= 1e-8


def test_cross_term_warning_and_correlated_solve():
    cfg = make_cfg(1, slow_fast_correlation=0.9)
    slow, fast = build_example(cfg)
    import warnings
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        f = solve_multiscale_hjb(slow, fast, cfg.control, 0.2, 1.0, 17, TorusGrid(2, 8), cross_warn=1e-6)
    assert f.cross_ratio > 0
    assert any("mixed x-y stencil" in str(w.message) for w in caught)
    assert np.all(np.isfinite(f.v))


def test_policy_field_rejects_out_of_box():
    with pytest.raises(ValueError):
        PolicyField(np.array([0.5, 1.5]), BOX)


def test_value_field_3d_interpolation(cfg1, ex1):
    slow, fast = ex1
    f = solve_multiscale_hjb(slow, fast, cfg1.control, 0.4, 1.0, 9, TorusGrid(2, 8))
    x = f.x_nodes[3]
    y = f.grid.coords()[10]
    assert f.at(x, y)[0] == pytest.approx(f.v[3].ravel()[10], abs=1e-14)
