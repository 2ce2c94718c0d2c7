"""Monotone finite-difference HJB solvers with Howard policy iteration.

Both solvers discretize

    beta v - min_u { b(u) v_x + (1/2) a(u) v_xx + l(u) } - (fast/cross terms) = 0

on ``[-alpha, alpha]`` with the oblique condition ``v_x(-alpha) = -h_minus``,
``v_x(alpha) = h_plus`` imposed through central ghost nodes.  The drift is upwinded
by the sign of ``b(u)`` at the control being evaluated, so every frozen policy gives
an M-matrix.
"""

from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import ControlBox, FastSpec, QuadraticControl, ScenarioConfig, SlowSpec, build_example
from .torus import NumericalError, TorusGrid, assemble_operator, _neighbours

__all__ = [
    "minimize_quadratic_control",
    "minimize_hamiltonian_grid",
    "PolicyField",
    "ValueField1D",
    "ValueField3D",
    "ConvergenceRow",
    "CrossTermWarning",
    "solve_effective_hjb",
    "solve_multiscale_hjb",
    "convergence_study",
    "check_neumann",
    "markov_policy_from_value",
    "sup_running_cost",
]

log = logging.getLogger(__name__)


class CrossTermWarning(RuntimeWarning):
    """The mixed x-y stencil dominates the monotone part of the operator."""


def minimize_quadratic_control(f, control: ControlBox):
    """Minimize ``u^2 - f u`` over the box; returns ``(u_star, min_value)``."""
    f = np.asarray(f, dtype=float)
    u = np.clip(0.5 * f, control.lo[0], control.hi[0])
    val = u * u - f * u
    if u.ndim == 0:
        return float(u), float(val)
    return u, val


def minimize_hamiltonian_grid(x, g, H, slow: SlowSpec, control: ControlBox, n_u: int, y=None):
    """Brute-force minimum of ``mu_SC g + a_SC H / 2 + L_SC`` (plus SF terms when ``y`` is given).

    The SF terms do not depend on u, so they only shift the minimum value.
    """
    if n_u < 2:
        raise ValueError("n_u must be >= 2")
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    H = np.asarray(H, dtype=float)
    us = control.grid(n_u)
    xb, gb, Hb = (np.asarray(t)[..., None] for t in np.broadcast_arrays(x, g, H))
    vals = slow.mu_sc(xb, us) * gb + 0.5 * slow.a_sc(xb, us) * Hb + slow.l_sc(xb, us)
    k = np.argmin(vals, axis=-1)
    u_star = us[k]
    best = np.take_along_axis(vals, k[..., None], axis=-1)[..., 0]
    if y is not None:
        best = best + slow.mu_sf(x, y) * g + 0.5 * slow.a_sf(x, y) * H + slow.l_sf(x, y)
    if np.ndim(best) == 0:
        return float(u_star), float(best)
    return u_star, best


@dataclass
class PolicyField:
    values: np.ndarray
    control: ControlBox

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < self.control.lo[0] - 1e-14) or np.any(v > self.control.hi[0] + 1e-14):
            raise ValueError("policy leaves the control box")
        self.values = v


@dataclass
class ValueField1D:
    x_nodes: np.ndarray
    v: np.ndarray
    policy: PolicyField
    beta: float
    residual: float
    iterations: int = 0

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])

    def __call__(self, x):
        return np.interp(x, self.x_nodes, self.v)


@dataclass
class ValueField3D:
    """Value on the product grid; ``v`` has shape ``(n_slow,) + torus shape``."""

    x_nodes: np.ndarray
    grid: TorusGrid
    v: np.ndarray
    policy: PolicyField
    epsilon: float
    beta: float
    residual: float
    iterations: int = 0
    cross_ratio: float = 0.0

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])

    def at(self, x, y):
        """Linear in x, periodic bilinear in y."""
        xs = self.x_nodes
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1, self.grid.d_y), (x.size, self.grid.d_y))
        s = np.clip((x - xs[0]) / self.dx, 0.0, xs.size - 1)
        i = np.minimum(np.floor(s).astype(int), xs.size - 2)
        w = s - i
        lo = self.grid.interpolate_stack(self.v, i, y)
        hi = self.grid.interpolate_stack(self.v, i + 1, y)
        return (1.0 - w) * lo + w * hi


@dataclass
class ConvergenceRow:
    epsilon: float
    err_inf: float
    err_sup: float
    runtime_s: float = 0.0
    iterations: int = 0


def _slow_nodes(alpha: float, n_slow: int) -> np.ndarray:
    return np.linspace(-alpha, alpha, n_slow)


class _SlowStencil:
    """Upwind / central / ghost-node x-stencil on a stack of ``m`` independent lines.

    Unknowns are ordered ``i * m + k`` (``i`` slow node, ``k`` line index).
    """

    def __init__(self, n_slow: int, dx: float, m: int, h_minus: float, h_plus: float):
        self.n, self.dx, self.m = n_slow, dx, m
        self.h_minus, self.h_plus = h_minus, h_plus
        i = np.repeat(np.arange(n_slow), m)
        self.i = i
        k = np.tile(np.arange(m), n_slow)
        up = np.where(i == n_slow - 1, n_slow - 2, i + 1)
        dn = np.where(i == 0, 1, i - 1)
        self.rows = np.arange(n_slow * m)
        self.up = up * m + k
        self.dn = dn * m + k
        self.left = i == 0
        self.right = i == n_slow - 1

    def derivatives(self, v):
        """Forward, backward and second quotients including ghost values."""
        v = v.ravel()
        dx = self.dx
        vu, vd = v[self.up], v[self.dn]
        # ghost substitution: v_{-1} = v_1 + 2 dx h_minus,  v_N = v_{N-2} + 2 dx h_plus
        vd = np.where(self.left, vd + 2 * dx * self.h_minus, vd)
        vu = np.where(self.right, vu + 2 * dx * self.h_plus, vu)
        return (vu - v) / dx, (v - vd) / dx, (vu - 2 * v + vd) / dx**2

    def assemble(self, b, a):
        """Matrix ``S`` and constant ``s`` with ``S v + s = b D^{+-} v + a D^2 v / 2``."""
        dx = self.dx
        bp = np.maximum(b, 0.0) / dx
        bm = np.maximum(-b, 0.0) / dx
        half = 0.5 * a / dx**2
        if np.any(a < -1e-12):
            raise NumericalError(f"negative second-order coefficient {a.min():.3e} in the slow operator")
        cu = bp + half
        cd = bm + half
        const = np.where(self.left, cd * 2 * dx * self.h_minus, 0.0)
        const = const + np.where(self.right, cu * 2 * dx * self.h_plus, 0.0)
        rows = np.concatenate([self.rows, self.rows, self.rows])
        cols = np.concatenate([self.up, self.dn, self.rows])
        vals = np.concatenate([cu, cd, -(cu + cd)])
        N = self.n * self.m
        return sp.csr_matrix((vals, (rows, cols)), shape=(N, N)), const


class _Bracket:
    """Control-dependent slow coefficients at a stack of nodes."""

    def __init__(self, slow: SlowSpec, control: ControlBox, x, y=None, n_control: int = 201):
        self.slow, self.control = slow, control
        self.x = x
        if y is None:
            self.sf_b = self.sf_a = self.sf_l = np.zeros_like(x)
        else:
            self.sf_b = slow.mu_sf(x, y)
            self.sf_a = slow.a_sf(x, y)
            self.sf_l = slow.l_sf(x, y)
        self.quad: Optional[QuadraticControl] = slow.quadratic
        self.u_grid = control.grid(n_control)

    def with_tables(self, mu_bar, a_bar, l_bar):
        self.sf_b, self.sf_a, self.sf_l = mu_bar, a_bar, l_bar
        return self

    def coefficients(self, u):
        s = self.slow
        b = self.sf_b + s.mu_sc(self.x, u)
        a = self.sf_a + s.a_sc(self.x, u)
        l = self.sf_l + s.l_sc(self.x, u)
        return b, a, l

    def improve(self, dp, dm, d2):
        """Exact upwind-consistent minimizer per node, returns ``(u, min value)``."""
        if self.quad is None:
            return self._improve_grid(dp, dm, d2)
        q = self.quad
        c = q.drift_coef
        lo, hi = self.control.lo[0], self.control.hi[0]
        base_sf = 0.5 * self.sf_a * d2 + self.sf_l + q.target**2

        def candidate(g, a_lo, a_hi):
            f = q.f(self.x, g, d2)
            u = np.clip(0.5 * f, a_lo, a_hi)
            val = u * u - f * u + self.sf_b * g + base_sf
            return u, val

        if c == 0.0:
            g = np.where(self.sf_b >= 0, dp, dm)
            return candidate(g, lo, hi)
        # b(u) = sf_b + c u changes sign at u0
        u0 = -self.sf_b / c
        if c > 0:
            pos_lo, pos_hi = np.maximum(u0, lo), np.full_like(u0, hi)
            neg_lo, neg_hi = np.full_like(u0, lo), np.minimum(u0, hi)
        else:
            pos_lo, pos_hi = np.full_like(u0, lo), np.minimum(u0, hi)
            neg_lo, neg_hi = np.maximum(u0, lo), np.full_like(u0, hi)
        up, vp = candidate(dp, pos_lo, np.maximum(pos_hi, pos_lo))
        un, vn = candidate(dm, np.minimum(neg_lo, neg_hi), neg_hi)
        vp = np.where(pos_lo <= pos_hi, vp, np.inf)
        vn = np.where(neg_lo <= neg_hi, vn, np.inf)
        take_p = vp <= vn
        u = np.where(take_p, up, un)
        return u, np.where(take_p, vp, vn)

    def _improve_grid(self, dp, dm, d2):
        us = self.u_grid
        x = self.x[:, None]
        b = self.sf_b[:, None] + self.slow.mu_sc(x, us)
        a = self.sf_a[:, None] + self.slow.a_sc(x, us)
        l = self.sf_l[:, None] + self.slow.l_sc(x, us)
        vals = np.where(b >= 0, b * dp[:, None], b * dm[:, None]) + 0.5 * a * d2[:, None] + l
        k = np.argmin(vals, axis=1)
        rows = np.arange(len(k))
        return us[k], vals[rows, k]


def _direct_solve(A, rhs, guess):
    try:
        return spla.splu(A.tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise NumericalError(f"linear solve failed in policy iteration: {exc}") from exc


class _BlockKrylovSolve:
    """BiCGSTAB preconditioned by exact LU factors of the diagonal blocks.

    Blocks are the per-slow-node torus slices, which carry the stiff 1/eps part.  Iterates
    until the max-norm residual is below ``beta * accuracy``, which bounds the max-norm
    error by ``accuracy`` for these diagonally dominant M-matrices.  The target is raised
    to the roundoff level of ``A v`` when that is larger.
    """

    def __init__(self, block: int, beta: float, accuracy: float = 1e-13, max_rounds: int = 20):
        self.block, self.beta, self.accuracy, self.max_rounds = block, beta, accuracy, max_rounds

    def __call__(self, A, rhs, guess):
        A = A.tocsr()
        m = self.block
        nb = A.shape[0] // m
        lus = [spla.splu(A[i * m:(i + 1) * m, i * m:(i + 1) * m].tocsc()) for i in range(nb)]

        def prec(r):
            r = np.asarray(r).reshape(nb, m)
            return np.concatenate([lus[i].solve(r[i]) for i in range(nb)])

        P = spla.LinearOperator(A.shape, prec)
        v = np.zeros_like(rhs) if guess is None else guess.copy()
        norm_a = float(np.max(abs(A).sum(axis=1)))
        norm_b = float(np.max(np.abs(rhs)))

        def target(v):
            floor = 16 * np.finfo(float).eps * (norm_a * float(np.max(np.abs(v))) + norm_b)
            return max(self.beta * self.accuracy, floor)

        for _ in range(self.max_rounds):
            res = float(np.max(np.abs(A @ v - rhs)))
            if res <= target(v):
                return v
            v, info = spla.bicgstab(A, rhs, x0=v, M=P, rtol=1e-15, atol=0.5 * target(v), maxiter=500)
            if info < 0 or not np.all(np.isfinite(v)):
                raise NumericalError(f"iterative solve broke down (info={info})")
        res = float(np.max(np.abs(A @ v - rhs)))
        if res > target(v):
            raise NumericalError(f"iterative solve stalled at residual {res:.3e}")
        return v


def _howard(n_unknowns, beta, stencil: _SlowStencil, bracket: _Bracket, fixed: Optional[sp.csr_matrix],
            control: ControlBox, tol: float, max_iter: int, v0=None, solve=_direct_solve):
    """Policy iteration; ``fixed`` holds the control-independent part of the operator."""
    if v0 is None:
        u = np.full(n_unknowns, float(np.clip(0.5 * (control.lo[0] + control.hi[0]), control.lo[0], control.hi[0])))
        if bracket.quad is not None:
            u = np.full(n_unknowns, float(np.clip(bracket.quad.target, control.lo[0], control.hi[0])))
    else:
        u = bracket.improve(*stencil.derivatives(v0))[0]
    eye = sp.identity(n_unknowns, format="csr")
    v = None
    for it in range(1, max_iter + 1):
        b, a, l = bracket.coefficients(u)
        S, s = stencil.assemble(b, a)
        A = beta * eye - S
        if fixed is not None:
            A = A - fixed
        v_new = solve(A, l + s, v)
        if not np.all(np.isfinite(v_new)):
            raise NumericalError("non-finite value in policy iteration")
        change = np.inf if v is None else float(np.max(np.abs(v_new - v)))
        v = v_new
        u_new, _ = bracket.improve(*stencil.derivatives(v))
        if change <= tol:
            break
        u = u_new
    else:
        raise NumericalError(f"policy iteration did not converge in {max_iter} iterations")
    # residual of the nonlinear scheme at the final value
    _, ham = bracket.improve(*stencil.derivatives(v))
    extra = fixed @ v if fixed is not None else 0.0
    residual = float(np.max(np.abs(beta * v - ham - extra)))
    return v, u, residual, it


def solve_effective_hjb(tables, slow: SlowSpec, control: ControlBox, beta: float, tol: float = 1e-10,
                        max_iter: int = 200, n_control: int = 201) -> ValueField1D:
    """Effective HJB on the table nodes with the slow model's boundary costs."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    x = np.asarray(tables.x_nodes, dtype=float)
    if x.size < 3:
        raise ValueError("need at least 3 slow nodes")
    dx = float(x[1] - x[0])
    stencil = _SlowStencil(x.size, dx, 1, slow.h_minus, slow.h_plus)
    bracket = _Bracket(slow, control, x, n_control=n_control).with_tables(
        np.asarray(tables.mu_bar, float), np.asarray(tables.a_bar, float), np.asarray(tables.l_bar, float))
    v, u, res, it = _howard(x.size, beta, stencil, bracket, None, control, tol, max_iter)
    return ValueField1D(x, v, PolicyField(u, control), beta, res, it)


def _fast_block(fast: FastSpec, x_nodes, grid: TorusGrid, epsilon: float, slow: SlowSpec, dx: float):
    """Block operator of the y-generator (scaled 1/eps) plus the mixed x-y term (scaled 1/sqrt(eps))."""
    nb = _neighbours(grid)
    y = grid.coords()
    blocks = []
    for xi in x_nodes:
        xs = np.full(grid.size, xi)
        drift = fast.mu_y(xs, y)
        diff = fast.a_y(xs, y)
        blocks.append(assemble_operator(drift, diff, grid, neighbours=nb))
    F = sp.block_diag(blocks, format="csr") / epsilon
    cross_ratio = 0.0
    if fast.xy_cov is not None:
        n_slow, M = len(x_nodes), grid.size
        X = np.repeat(x_nodes, M)
        Y = np.tile(y, (n_slow, 1))
        cov = np.asarray(fast.xy_cov(X, Y)).reshape(n_slow * M, grid.d_y) / np.sqrt(epsilon)
        i = np.repeat(np.arange(n_slow), M)
        interior = (i > 0) & (i < n_slow - 1)
        plus, minus = nb
        rows, cols, vals = [], [], []
        base = np.arange(n_slow * M)
        k = base % M
        for j in range(grid.d_y):
            q = np.where(interior, cov[:, j], 0.0) / (4 * dx * grid.h)
            for si, sj, sgn in ((1, plus, 1.0), (1, minus, -1.0), (-1, plus, -1.0), (-1, minus, 1.0)):
                ii = np.clip(i + si, 0, n_slow - 1)
                rows.append(base)
                cols.append(ii * M + sj[j][k])
                vals.append(sgn * q)
        C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=F.shape)
        diag = np.abs(F.diagonal())
        offsum = np.asarray(abs(C).sum(axis=1)).ravel()
        cross_ratio = float(np.max(offsum / np.maximum(diag, 1e-300)))
        F = F + C
    return F, cross_ratio


def solve_multiscale_hjb(slow: SlowSpec, fast: FastSpec, control: ControlBox, epsilon: float, beta: float,
                         n_slow: int, grid: TorusGrid, tol: float = 1e-10, max_iter: int = 200,
                         n_control: int = 201, cross_warn: float = 0.5) -> ValueField3D:
    """Multiscale HJB on ``n_slow`` x-nodes times the torus grid."""
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not beta > 0:
        raise ValueError("beta must be positive")
    x = _slow_nodes(slow.alpha, n_slow)
    dx = float(x[1] - x[0])
    M = grid.size
    N = n_slow * M
    F, cross_ratio = _fast_block(fast, x, grid, epsilon, slow, dx)
    if cross_ratio > cross_warn:
        warnings.warn(
            f"mixed x-y stencil reaches {cross_ratio:.2f} of the diagonal at eps={epsilon}; "
            "the scheme may lose monotonicity", CrossTermWarning, stacklevel=2)
    X = np.repeat(x, M)
    Y = np.tile(grid.coords(), (n_slow, 1))
    stencil = _SlowStencil(n_slow, dx, M, slow.h_minus, slow.h_plus)
    bracket = _Bracket(slow, control, X, Y, n_control=n_control)
    t0 = time.perf_counter()
    solver = _BlockKrylovSolve(M, beta, accuracy=min(1e-12, 1e-2 * tol))
    v, u, res, it = _howard(N, beta, stencil, bracket, F, control, tol, max_iter, solve=solver)
    log.info("multiscale eps=%g solved in %d iterations (%.1fs)", epsilon, it, time.perf_counter() - t0)
    shape = (n_slow,) + grid.shape
    return ValueField3D(x, grid, v.reshape(shape), PolicyField(u.reshape(shape), control),
                        float(epsilon), float(beta), res, it, cross_ratio)


def sup_running_cost(slow: SlowSpec, control: ControlBox, n_samples: int = 64, n_u: int = 201) -> float:
    """Sampled sup of |L_SF + L_SC| over X x T^d x U."""
    x = np.linspace(-slow.alpha, slow.alpha, n_samples)
    t = np.linspace(0, 1, 17)[:-1]
    y = np.stack(np.meshgrid(t, t, indexing="ij"), -1).reshape(-1, 2)
    us = control.grid(n_u)
    lsf = np.abs(slow.l_sf(x[:, None], y[None, :, :])).max()
    lsc = np.abs(slow.l_sc(x[:, None], us[None, :])).max()
    return float(lsf + lsc)


def convergence_study(cfg: ScenarioConfig, tables=None, threads: int = 1, slow=None, fast=None):
    """Relaxed-semilimit errors of the multiscale values against the effective value, per epsilon.

    Returns ``(rows, effective_field, multiscale_fields)``.
    """
    from .homogenize import effective_tables_for  # local import to avoid a cycle

    if slow is None or fast is None:
        slow, fast = build_example(cfg)
    control = cfg.control
    grid = TorusGrid(cfg.d_y, cfg.n_torus)
    if tables is None:
        tables = effective_tables_for(slow, fast, cfg.n_slow, grid, cfg.tol_density)
    vbar = solve_effective_hjb(tables, slow, control, cfg.beta, cfg.tol_policy, n_control=cfg.n_control)

    def one(eps):
        t0 = time.perf_counter()
        field = solve_multiscale_hjb(slow, fast, control, eps, cfg.beta, cfg.n_slow, grid,
                                     cfg.tol_policy, n_control=cfg.n_control)
        flat = field.v.reshape(cfg.n_slow, -1)
        err_inf = float(np.max(np.abs(flat.min(axis=1) - vbar.v)))
        err_sup = float(np.max(np.abs(flat.max(axis=1) - vbar.v)))
        return ConvergenceRow(eps, err_inf, err_sup, time.perf_counter() - t0, field.iterations), field

    eps_list = sorted(cfg.epsilon_list, reverse=True)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, eps_list))
    else:
        results = [one(e) for e in eps_list]
    rows = [r for r, _ in results]
    fields = [f for _, f in results]
    return rows, vbar, fields


def _one_sided_boundary_slopes(v: np.ndarray, dx: float):
    """Second-order one-sided x-derivatives at both ends (axis 0)."""
    left = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dx)
    right = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * dx)
    return left, right


def check_neumann(field, h_minus: float, h_plus: Optional[float] = None) -> float:
    """Max mismatch of the one-sided boundary slopes against ``-h_minus`` and ``+h_plus``."""
    if h_plus is None:
        h_plus = h_minus
    v = np.asarray(field.v, dtype=float)
    left, right = _one_sided_boundary_slopes(v, field.dx)
    return float(max(np.max(np.abs(left + h_minus)), np.max(np.abs(right - h_plus))))


def _x_derivatives(v: np.ndarray, dx: float):
    g = np.empty_like(v)
    H = np.empty_like(v)
    g[1:-1] = (v[2:] - v[:-2]) / (2 * dx)
    g[0], g[-1] = _one_sided_boundary_slopes(v, dx)
    H[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx**2
    H[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / dx**2 if len(v) > 3 else H[1]
    H[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / dx**2 if len(v) > 3 else H[-2]
    return g, H


def markov_policy_from_value(field, slow: SlowSpec, control: ControlBox, n_u: int = 201) -> PolicyField:
    """Feedback control from difference quotients of a solved value field."""
    v = np.asarray(field.v, dtype=float)
    g, H = _x_derivatives(v, field.dx)
    x = np.asarray(field.x_nodes, dtype=float).reshape((-1,) + (1,) * (v.ndim - 1))
    x = np.broadcast_to(x, v.shape)
    if slow.quadratic is not None:
        u, _ = minimize_quadratic_control(slow.quadratic.f(x, g, H), control)
    else:
        u, _ = minimize_hamiltonian_grid(x, g, H, slow, control, n_u)
    return PolicyField(np.asarray(u, dtype=float).reshape(v.shape), control)
