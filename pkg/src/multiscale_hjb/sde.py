"""Reflected Euler-Maruyama simulation of the multiscale and effective controlled SDEs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .model import ControlBox, FastSpec, SlowSpec
from .torus import _psd_sqrt

__all__ = [
    "PathEstimate",
    "ReflectedStep",
    "step_reflected_slow",
    "reflect",
    "auto_horizon",
    "policy_from_field",
    "simulate_multiscale_cost",
    "simulate_effective_cost",
]


@dataclass
class PathEstimate:
    mean: float
    stderr: float
    n_paths: int
    horizon: float
    dt: float
    seed: int
    costs: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True)
class ReflectedStep:
    x_new: float
    dl: float
    reflected: bool


def reflect(x_prop, alpha: float):
    """Project proposals onto ``[-alpha, alpha]``; returns ``(x, dl_minus, dl_plus)``."""
    x_prop = np.asarray(x_prop, dtype=float)
    dl_plus = np.maximum(x_prop - alpha, 0.0)
    dl_minus = np.maximum(-alpha - x_prop, 0.0)
    return np.clip(x_prop, -alpha, alpha), dl_minus, dl_plus


def step_reflected_slow(x: float, drift: float, dispersion: float, dt: float, dW: float,
                        alpha: float) -> ReflectedStep:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(x) > alpha:
        raise ValueError(f"x={x} outside [-{alpha}, {alpha}]")
    x_new, dm, dp = reflect(x + drift * dt + dispersion * dW, alpha)
    dl = float(dm + dp)
    return ReflectedStep(float(x_new), dl, dl > 0)


def auto_horizon(sup_cost: float, beta: float, tol: float) -> float:
    """Horizon after which the discounted tail is below ``tol`` (with a safety factor 2)."""
    return 2.0 * math.log(max(sup_cost / beta, 1.0) / tol) / beta


def policy_from_field(field) -> Callable:
    """Feedback control interpolated from a solved value field's policy.

    Linear in x; for multiscale fields, periodic bilinear in y.
    """
    xs = np.asarray(field.x_nodes, dtype=float)
    u = np.asarray(field.policy.values, dtype=float)
    dx = xs[1] - xs[0]
    n_x = xs.size

    def locate(x):
        s = np.clip((np.asarray(x, dtype=float) - xs[0]) / dx, 0.0, n_x - 1)
        i = np.minimum(np.floor(s).astype(int), n_x - 2)
        return i, s - i

    if u.ndim == 1:
        return lambda x, y=None: np.interp(x, xs, u)

    grid = field.grid

    def feedback(x, y):
        i, w = locate(x)
        lo = grid.interpolate_stack(u, i, y)
        hi = grid.interpolate_stack(u, i + 1, y)
        return (1.0 - w) * lo + w * hi

    return feedback


def _constant_or(policy) -> Callable:
    if callable(policy):
        return policy
    value = float(policy)
    return lambda x, y=None: np.full(np.shape(x), value)


def _discount_weights(beta, dt, steps):
    t = np.arange(steps) * dt
    disc = np.exp(-beta * t)
    return t, disc, disc * (-math.expm1(-beta * dt)) / beta


def simulate_multiscale_cost(slow: SlowSpec, fast: FastSpec, policy: Union[float, Callable], epsilon: float,
                             x0: float, y0, beta: float, T: float, dt: float, n_paths: int, seed: int,
                             control: Optional[ControlBox] = None, keep_costs: bool = False) -> PathEstimate:
    """Discounted cost of the reflected two-scale system under a feedback policy.

    Running cost uses the exact discount integral over each step; the boundary cost
    uses the discount at the start of the step.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if dt > epsilon / 10 * (1 + 1e-12):
        raise ValueError(f"dt={dt} violates dt <= eps/10 = {epsilon / 10}")
    alpha = slow.alpha
    if abs(x0) > alpha:
        raise ValueError(f"x0={x0} outside [-{alpha}, {alpha}]")
    rng = np.random.default_rng(seed)
    feedback = _constant_or(policy)
    steps = int(round(T / dt))
    _, disc, run_w = _discount_weights(beta, dt, steps)
    d = fast.d_y
    x = np.full(n_paths, float(x0))
    y = np.tile(np.asarray(y0, dtype=float), (n_paths, 1))
    cost = np.zeros(n_paths)
    sq = math.sqrt(dt)
    a0 = np.asarray(fast.a_y(x, y))
    fixed_root = _psd_sqrt(a0[0]) if np.all(a0 == a0[:1]) and fast.xy_cov is None else None
    for k in range(steps):
        u = feedback(x, y)
        if control is not None:
            u = control.clip(u)
        mu_x = slow.mu_sf(x, y) + slow.mu_sc(x, u)
        s_x = slow.sigma_sf(x, y) + slow.sigma_sc(x, u)
        cost += run_w[k] * (slow.l_sf(x, y) + slow.l_sc(x, u))
        z = rng.standard_normal((n_paths, 1 + d)) * sq
        if fast.xy_cov is None:
            dw_x = s_x * z[:, 0]
            root = fixed_root if fixed_root is not None else _psd_sqrt(fast.a_y(x, y))
            dw_y = z[:, 1:] @ root.T if root.ndim == 2 else np.einsum("nij,nj->ni", root, z[:, 1:])
        else:
            joint = np.empty((n_paths, 1 + d, 1 + d))
            cov = fast.xy_cov(x, y)
            joint[:, 0, 0] = s_x**2
            joint[:, 0, 1:] = cov
            joint[:, 1:, 0] = cov
            joint[:, 1:, 1:] = fast.a_y(x, y)
            noise = np.einsum("nij,nj->ni", _psd_sqrt(joint), z)
            dw_x, dw_y = noise[:, 0], noise[:, 1:]
        y_next = y + fast.mu_y(x, y) * (dt / epsilon) + dw_y / math.sqrt(epsilon)
        x, dl_m, dl_p = reflect(x + mu_x * dt + dw_x, alpha)
        cost += disc[k] * (slow.h_minus * dl_m + slow.h_plus * dl_p)
        y = y_next - np.floor(y_next)
    return _estimate(cost, T, dt, seed, keep_costs)


def simulate_effective_cost(tables, slow: SlowSpec, policy: Union[float, Callable], x0: float, beta: float,
                            T: float, dt: float, n_paths: int, seed: int, control: Optional[ControlBox] = None,
                            keep_costs: bool = False) -> PathEstimate:
    """Discounted cost of the reflected effective SDE with coefficients interpolated from ``tables``."""
    alpha = slow.alpha
    if abs(x0) > alpha:
        raise ValueError(f"x0={x0} outside [-{alpha}, {alpha}]")
    rng = np.random.default_rng(seed)
    feedback = _constant_or(policy)
    steps = int(round(T / dt))
    _, disc, run_w = _discount_weights(beta, dt, steps)
    x = np.full(n_paths, float(x0))
    cost = np.zeros(n_paths)
    sq = math.sqrt(dt)
    for k in range(steps):
        u = feedback(x)
        if control is not None:
            u = control.clip(u)
        mu_bar, a_bar, l_bar = tables.at(x)
        drift = mu_bar + slow.mu_sc(x, u)
        disp = np.sqrt(np.clip(a_bar + slow.a_sc(x, u), 0.0, None))
        cost += run_w[k] * (l_bar + slow.l_sc(x, u))
        x, dl_m, dl_p = reflect(x + drift * dt + disp * rng.standard_normal(n_paths) * sq, alpha)
        cost += disc[k] * (slow.h_minus * dl_m + slow.h_plus * dl_p)
    return _estimate(cost, T, dt, seed, keep_costs)


def _estimate(cost, T, dt, seed, keep_costs) -> PathEstimate:
    n = cost.size
    mean = float(np.sum(cost) / n)
    stderr = float(np.std(cost, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return PathEstimate(mean, stderr, n, float(T), float(dt), int(seed), cost if keep_costs else None)
