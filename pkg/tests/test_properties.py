"""Property-based checks of structural invariants."""

from types import SimpleNamespace

import numpy as np
from hypothesis import given, settings, strategies as st

from conftest import make_cfg
from multiscale_hjb.cell import solve_cell_t
from multiscale_hjb.hjb import check_neumann, minimize_quadratic_control, solve_effective_hjb
from multiscale_hjb.homogenize import EffectiveTables, HamiltonianPoint
from multiscale_hjb.model import ControlBox, build_example, constraint_phi, load_scenario
from multiscale_hjb.sde import reflect
from multiscale_hjb.torus import TorusGrid, assemble_generator, solve_invariant_density

FAST = settings(max_examples=25, deadline=None)
SLOW = settings(max_examples=8, deadline=None)

alphas = st.floats(0.2, 3.0)
unit = st.floats(0.0, 1.0)
coef = st.floats(-2.0, 2.0)
GRID8 = TorusGrid(2, 8)


@FAST
@given(alphas, unit)
def test_phi_nonpositive_inside_and_zero_on_boundary(alpha, s):
    x = alpha * (2 * s - 1)
    value, _ = constraint_phi(x, alpha)
    assert value <= 0.0
    assert abs(constraint_phi(alpha, alpha)[0]) < 1e-12
    assert abs(constraint_phi(-alpha, alpha)[0]) < 1e-12


@FAST
@given(alphas, unit)
def test_phi_derivative_matches_difference_quotient(alpha, s):
    x = alpha * (2 * s - 1)
    h = 1e-6
    fd = (constraint_phi(x + h, alpha)[0] - constraint_phi(x - h, alpha)[0]) / (2 * h)
    _, deriv = constraint_phi(x, alpha)
    assert abs(fd - deriv) <= 1e-6 * (1 + abs(deriv))


@FAST
@given(alphas)
def test_phi_outward_slope_at_boundary(alpha):
    assert abs(constraint_phi(alpha, alpha)[1] - 1.0) < 1e-12
    assert abs(constraint_phi(-alpha, alpha)[1] + 1.0) < 1e-12


@FAST
@given(st.floats(-10, 10), st.floats(-2, 2), st.floats(0, 3))
def test_quadratic_minimizer_optimal_in_box(f, lo, width):
    box = ControlBox(lo, lo + width)
    u, val = minimize_quadratic_control(f, box)
    assert lo - 1e-15 <= u <= lo + width + 1e-15
    trial = np.linspace(lo, lo + width, 401)
    assert val <= np.min(trial**2 - f * trial) + 1e-12


@FAST
@given(coef, coef, st.floats(0.2, 2.0), st.floats(-1, 1))
def test_generator_conservative_and_monotone(ta, tc, sy, x_bar):
    _, fast = build_example(make_cfg(1, theta_a=ta, theta_c=tc, sigma_y=sy))
    gen = assemble_generator(fast, x_bar, GRID8)
    assert np.max(np.abs(gen.matrix.sum(axis=1))) < 1e-9
    assert gen.off_diagonal_min() >= 0.0
    assert np.all(gen.matrix.diagonal() <= 0.0)


@SLOW
@given(coef, coef, st.floats(0.3, 2.0), st.floats(-1, 1), st.sampled_from([1, 2]))
def test_density_positive_and_normalized(ta, tc, sy, x_bar, example):
    _, fast = build_example(make_cfg(example, theta_a=ta, theta_c=tc, sigma_y=sy))
    rho = solve_invariant_density(fast, x_bar, GRID8)
    assert np.all(rho.values > 0)
    assert abs(rho.integral() - 1.0) < 1e-10


@FAST
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), alphas)
def test_reflect_invariants(xs, alpha):
    prop = np.array(xs)
    x, dm, dp = reflect(prop, alpha)
    assert np.all(np.abs(x) <= alpha)
    assert np.all(dm >= 0) and np.all(dp >= 0)
    assert np.all(dm * dp == 0)
    assert np.allclose(x, prop + dm - dp, atol=1e-12)
    inside = np.abs(prop) <= alpha
    assert np.array_equal(x[inside], prop[inside])


@FAST
@given(st.sampled_from([1, 2]), coef, st.floats(0.1, 2.0), st.floats(0.05, 0.9), st.integers(0, 2**31 - 1),
       st.sets(st.floats(0.01, 0.9), min_size=1, max_size=5))
def test_config_text_round_trip(example, ta, beta, mc_epsilon, seed, eps):
    cfg = make_cfg(example, theta_a=ta, beta=beta, mc_epsilon=mc_epsilon, seed=seed, epsilon_list=tuple(sorted(eps, reverse=True)))
    back = load_scenario(cfg.to_text())
    assert back == cfg
    assert back.digest() == cfg.digest()


@SLOW
@given(st.floats(-1, 1), st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3))
def test_cell_solution_linear_in_source(x_bar, g, H, scale):
    slow, fast = build_example(make_cfg(1))
    p = HamiltonianPoint(x_bar, g, H)
    ctrl = ControlBox(0.0, 1.0)
    base = solve_cell_t(p, fast, slow, ctrl, GRID8, 1.0, 0.1)
    scaled = solve_cell_t(p, fast, slow, ctrl, GRID8, 1.0, 0.1, scale=scale)
    assert np.allclose(scaled.w, scale * base.w, atol=1e-12 * (1 + np.abs(base.w).max()))


@FAST
@given(coef, coef, coef, alphas, st.integers(3, 8))
def test_neumann_check_exact_on_quadratics(c0, c1, c2, alpha, k):
    x = np.linspace(-alpha, alpha, 2**k + 1)
    field = SimpleNamespace(v=c0 + c1 * x + c2 * x**2, dx=x[1] - x[0])
    left, right = c1 - 2 * c2 * alpha, c1 + 2 * c2 * alpha
    h_m, h_p = -left, right
    assert check_neumann(field, h_m, h_p) < 1e-9 * (1 + abs(c1) + abs(c2))
    assert abs(check_neumann(field, h_m + 0.5, h_p) - 0.5) < 1e-9 * (1 + abs(c1) + abs(c2))


@SLOW
@given(st.floats(-2, 2), st.floats(0.2, 2.0), st.floats(0.05, 0.5))
def test_cost_shift_moves_effective_value(delta, beta, drift):
    slow, _ = build_example(make_cfg(1))
    x = np.linspace(-1, 1, 17)
    tables = EffectiveTables(x, -drift * x, 0.3 + 0.1 * x**2, 0.2 * np.cos(x), np.zeros_like(x))
    shifted = EffectiveTables(x, tables.mu_bar, tables.a_bar, tables.l_bar + delta, tables.kappa)
    ctrl = ControlBox(0.0, 1.0)
    v0 = solve_effective_hjb(tables, slow, ctrl, beta)
    v1 = solve_effective_hjb(shifted, slow, ctrl, beta)
    assert np.max(np.abs(v1.v - v0.v - delta / beta)) < 1e-8
    assert np.allclose(v1.policy.values, v0.policy.values)
