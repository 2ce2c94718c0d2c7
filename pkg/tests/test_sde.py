import dataclasses
import math

import numpy as np
import pytest

from multiscale_hjb.homogenize import effective_tables_for
from multiscale_hjb.hjb import solve_effective_hjb
from multiscale_hjb.model import build_example
from multiscale_hjb.sde import (auto_horizon, policy_from_field, reflect, simulate_effective_cost,
                                simulate_multiscale_cost, step_reflected_slow)
from multiscale_hjb.torus import TorusGrid

from conftest import make_cfg


def test_identity_step():
    s = step_reflected_slow(0.0, 0.0, 1.0, 0.01, 0.0, 1.0)
    assert (s.x_new, s.dl, s.reflected) == (0.0, 0.0, False)


def test_projection_arithmetic():
    s = step_reflected_slow(1.0 - 0.01, 5.0, 0.0, 0.01, 0.0, 1.0)
    assert s.x_new == 1.0 and s.dl == pytest.approx(0.04) and s.reflected
    s = step_reflected_slow(-0.99, -5.0, 0.0, 0.01, 0.0, 1.0)
    assert s.x_new == -1.0 and s.dl == pytest.approx(0.04)


def test_step_rejects_bad_inputs():
    with pytest.raises(ValueError):
        step_reflected_slow(0.0, 0.0, 1.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        step_reflected_slow(1.5, 0.0, 1.0, 0.1, 0.0, 1.0)


def _reflected_bm_histogram(dt, n=2000, T=6.0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    every = int(round(0.5 / dt))
    samples = []
    for k in range(int(round(T / dt))):
        x, _, _ = reflect(x + rng.standard_normal(n) * math.sqrt(dt), 1.0)
        if k >= every and k % every == 0:
            samples.append(x.copy())
    samples = np.concatenate(samples)
    atom = float(np.mean(np.abs(samples) == 1.0))
    return np.histogram(samples, bins=10, range=(-1, 1))[0] / samples.size, samples.size, atom


def test_reflected_brownian_uniform():
    p, n, _ = _reflected_bm_histogram(1e-4)
    assert np.max(np.abs(p - 0.1)) <= 3 * math.sqrt(0.1 * 0.9 / n)


def test_projection_boundary_bias_shrinks_with_dt():
    # the projection leaves an O(sqrt(dt)) atom at the endpoints
    atoms = [_reflected_bm_histogram(dt)[2] for dt in (1e-2, 1e-3)]
    assert 0 < atoms[1] < 0.5 * atoms[0]


def _zero_cost(**kw):
    cfg = make_cfg(1, theta_e=0.0, **kw)
    slow, fast = build_example(cfg)
    return cfg, dataclasses.replace(slow, l_sc=lambda x, u: 0.0 * np.asarray(u) * np.asarray(x)), fast


def test_multiscale_zero_cost():
    cfg, slow, fast = _zero_cost()
    est = simulate_multiscale_cost(slow, fast, 0.5, 0.2, 0.3, (0.1, 0.2), 1.0, 2.0, 0.01, 200, 0)
    assert est.mean == 0.0 and est.stderr == 0.0


def test_multiscale_constant_cost_exact():
    cfg, slow, fast = _zero_cost()
    slow = slow.with_cost_shift(0.7)
    T, beta = 3.0, 1.3
    est = simulate_multiscale_cost(slow, fast, 0.2, 0.2, 0.0, (0.5, 0.5), beta, T, 0.01, 100, 1)
    assert est.mean == pytest.approx(0.7 * (1 - math.exp(-beta * T)) / beta, abs=1e-10)
    half = simulate_multiscale_cost(slow, fast, 0.2, 0.2, 0.0, (0.5, 0.5), beta, T, 0.005, 100, 1)
    assert abs(half.mean - est.mean) <= 1e-10


def test_effective_zero_and_constant_cost():
    cfg, slow, fast = _zero_cost()
    tables = effective_tables_for(slow, fast, 9, TorusGrid(2, 8))
    est = simulate_effective_cost(tables, slow, 0.5, 0.0, 1.0, 2.0, 0.01, 100, 0)
    assert est.mean == 0.0
    shifted = slow.with_cost_shift(0.4)
    tables = effective_tables_for(shifted, fast, 9, TorusGrid(2, 8))
    est = simulate_effective_cost(tables, shifted, 0.5, 0.0, 2.0, 4.0, 0.01, 100, 0)
    assert est.mean == pytest.approx(0.4 * (1 - math.exp(-8.0)) / 2.0, abs=1e-10)


def test_dt_must_resolve_epsilon(ex1):
    slow, fast = ex1
    with pytest.raises(ValueError, match="eps/10"):
        simulate_multiscale_cost(slow, fast, 0.5, 0.05, 0.0, (0, 0), 1.0, 1.0, 0.01, 10, 0)


def test_seed_determinism(ex1):
    slow, fast = ex1
    a = simulate_multiscale_cost(slow, fast, 0.3, 0.2, 0.1, (0.2, 0.3), 1.0, 1.0, 0.01, 300, 42)
    b = simulate_multiscale_cost(slow, fast, 0.3, 0.2, 0.1, (0.2, 0.3), 1.0, 1.0, 0.01, 300, 42)
    assert a == b


def test_boundary_cost_only_when_reflected():
    # deterministic drift towards +alpha: cost is exactly the boundary term
    cfg = make_cfg(1, theta_a=0.0, theta_b=-1.0, sigma_x=1e-300, theta_e=1.0)
    slow, fast = build_example(cfg)
    slow = dataclasses.replace(slow, l_sc=lambda x, u: 0.0 * np.asarray(u) * np.asarray(x),
                               sigma_sf=lambda x, y: 0.0 * np.asarray(x) * np.ones(np.shape(y)[:-1]))
    est = simulate_multiscale_cost(slow, fast, 1.0, 0.2, 0.95, (0, 0), 1.0, 1.0, 0.01, 5, 0)
    # after reaching alpha the local time grows at rate 1 (drift 1): cost = int e^{-t} dt from t=0.05
    steps = np.arange(100) * 0.01
    expected = 0.01 * np.sum(np.exp(-steps[steps >= 0.05 - 1e-12]))
    assert est.mean == pytest.approx(expected, abs=2e-2)


def test_states_stay_in_domain():
    x, dm, dp = reflect(np.array([-3.0, -1.0, 0.2, 1.0, 2.5]), 1.0)
    assert np.all(np.abs(x) <= 1.0)
    assert np.all((dm + dp > 0) <= (np.abs(x) == 1.0))


def test_auto_horizon():
    T = auto_horizon(0.25, 1.0, 1e-3)
    assert T == pytest.approx(2 * math.log(1000))
    tail_bound = max(0.25, 1.0) * math.exp(-T / 2)
    assert tail_bound <= 1e-3 + 1e-15


def test_effective_mc_matches_pde(cfg1, ex1):
    slow, fast = ex1
    tables = effective_tables_for(slow, fast, 33, TorusGrid(2, 16))
    v = solve_effective_hjb(tables, slow, cfg1.control, 1.0)
    est = simulate_effective_cost(tables, slow, policy_from_field(v), 0.5, 1.0, 10.0, 0.01, 2000, 3,
                                  control=cfg1.control)
    assert abs(est.mean - v(0.5)) <= 3 * est.stderr + 0.02


def test_keep_costs(ex1):
    slow, fast = ex1
    est = simulate_multiscale_cost(slow, fast, 0.5, 0.2, 0.0, (0, 0), 1.0, 0.5, 0.01, 20, 0, keep_costs=True)
    assert est.costs.shape == (20,)
    assert est.mean == pytest.approx(est.costs.mean())
