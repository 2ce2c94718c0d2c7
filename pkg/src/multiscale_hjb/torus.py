"""Periodic-grid generator of the frozen fast dynamics and its invariant density.

Node ``j = (j_1, ..., j_d)`` sits at ``y = j h`` with ``h = 1/n`` and is stored at the
C-order flat index ``ravel_multi_index(j, (n,) * d)``.  The generator matrix acts on
column vectors of nodal values, ``(L f)_j ~ (L^x f)(y_j)``; the adjoint is its transpose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import FastSpec

__all__ = [
    "NumericalError",
    "TorusGrid",
    "GeneratorMatrix",
    "DensityField",
    "assemble_generator",
    "assemble_operator",
    "solve_invariant_density",
    "density_sweep",
    "fd_parameter_derivative",
    "DerivativeCheck",
    "occupation_measure_mc",
]

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A solver failed or produced output violating a structural invariant."""


@dataclass(frozen=True)
class TorusGrid:
    d_y: int
    n: int

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"torus grid needs n >= 4, got {self.n}")
        if self.d_y < 1:
            raise ValueError(f"torus dimension must be >= 1, got {self.d_y}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d_y

    @property
    def size(self) -> int:
        return self.n**self.d_y

    @property
    def cell_volume(self) -> float:
        return self.h**self.d_y

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(size, d_y)`` in flat-index order."""
        axes = np.meshgrid(*([np.arange(self.n) * self.h] * self.d_y), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)

    def index(self, multi) -> np.ndarray:
        multi = np.asarray(multi) % self.n
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.shape)

    def multi_index(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(flat, self.shape), axis=-1)

    def shifted(self, offset) -> np.ndarray:
        """Flat index of ``node + offset`` (with wraparound) for every node."""
        multi = self.multi_index(np.arange(self.size)) + np.asarray(offset)
        return self.index(multi)

    def integrate(self, values) -> float:
        return float(self.cell_volume * np.sum(values))

    def interpolate(self, values, y) -> np.ndarray:
        """Periodic multilinear interpolation of nodal ``values`` at points ``y`` (..., d_y)."""
        values = np.asarray(values).reshape(self.shape)
        y = np.asarray(y, dtype=float)
        s = np.mod(y, 1.0) * self.n
        lo = np.floor(s).astype(int)
        w = s - lo
        out = np.zeros(y.shape[:-1])
        for corner in range(2**self.d_y):
            bits = [(corner >> k) & 1 for k in range(self.d_y)]
            weight = np.ones(y.shape[:-1])
            idx = []
            for k, b in enumerate(bits):
                weight = weight * (w[..., k] if b else 1.0 - w[..., k])
                idx.append((lo[..., k] + b) % self.n)
            out += weight * values[tuple(idx)]
        return out

    def interpolate_stack(self, stack, layer, y) -> np.ndarray:
        """Like ``interpolate`` but point ``k`` reads slice ``stack[layer[k]]``."""
        stack = np.asarray(stack).reshape((-1,) + self.shape)
        y = np.asarray(y, dtype=float)
        s = np.mod(y, 1.0) * self.n
        lo = np.floor(s).astype(int)
        w = s - lo
        out = np.zeros(y.shape[:-1])
        for corner in range(2**self.d_y):
            weight = np.ones(y.shape[:-1])
            idx = [np.asarray(layer)]
            for k in range(self.d_y):
                b = (corner >> k) & 1
                weight = weight * (w[..., k] if b else 1.0 - w[..., k])
                idx.append((lo[..., k] + b) % self.n)
            out += weight * stack[tuple(idx)]
        return out


@dataclass
class GeneratorMatrix:
    """Sparse discrete generator ``L`` (CSR) with the adjoint available as ``L.T``."""

    matrix: sp.csr_matrix
    grid: TorusGrid
    x_bar: float
    drift_sign: np.ndarray

    @property
    def adjoint(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f).ravel()

    def off_diagonal_min(self) -> float:
        off = self.matrix - sp.diags(self.matrix.diagonal())
        return float(off.data.min()) if off.nnz else 0.0

    def row_sum_max(self) -> float:
        return float(np.max(np.abs(self.matrix @ np.ones(self.grid.size))))


@dataclass
class DensityField:
    grid: TorusGrid
    values: np.ndarray
    x_bar: float
    residual: float = 0.0

    def integral(self) -> float:
        return self.grid.integrate(self.values)

    def integrate(self, f_nodes) -> float:
        """Rectangle-rule integral of ``f * rho`` with ``f`` given at the nodes."""
        return self.grid.integrate(np.asarray(f_nodes).reshape(self.grid.shape) * self.values)


def _neighbours(grid: TorusGrid):
    d = grid.d_y
    eye = np.eye(d, dtype=int)
    plus = [grid.shifted(eye[i]) for i in range(d)]
    minus = [grid.shifted(-eye[i]) for i in range(d)]
    return plus, minus


def assemble_operator(drift: np.ndarray, diffusion: np.ndarray, grid: TorusGrid,
                      sign: Optional[np.ndarray] = None, neighbours=None) -> sp.csr_matrix:
    """Monotone periodic stencil for ``drift . D f + (1/2) tr(diffusion D^2 f)``.

    ``drift`` has shape ``(N, d)``, ``diffusion`` shape ``(N, d, d)``.  The upwind direction
    follows ``sign`` (defaults to the sign of ``drift``); fixing ``sign`` makes the map
    linear in ``drift``, which the parameter-derivative check relies on.
    """
    N, d = grid.size, grid.d_y
    h = grid.h
    drift = np.asarray(drift, dtype=float).reshape(N, d)
    diffusion = np.asarray(diffusion, dtype=float).reshape(N, d, d)
    if sign is None:
        sign = drift >= 0
    plus, minus = neighbours if neighbours is not None else _neighbours(grid)
    rows = np.arange(N)
    r, c, v = [], [], []
    diag = np.zeros(N)
    for i in range(d):
        fwd = np.where(sign[:, i], drift[:, i], 0.0) / h
        bwd = np.where(sign[:, i], 0.0, -drift[:, i]) / h
        half_a = 0.5 * diffusion[:, i, i] / h**2
        r += [rows, rows]
        c += [plus[i], minus[i]]
        v += [fwd + half_a, bwd + half_a]
        diag -= fwd + bwd + 2.0 * half_a
    for i in range(d):
        for j in range(i + 1, d):
            # 0.5 * (a_ij + a_ji) d_ij f with the centered four-point stencil
            q = 0.5 * (diffusion[:, i, j] + diffusion[:, j, i]) / (4.0 * h**2)
            if not np.any(q):
                continue
            pp, pm = plus[j][plus[i]], minus[j][plus[i]]
            mp, mm = plus[j][minus[i]], minus[j][minus[i]]
            r += [rows] * 4
            c += [pp, pm, mp, mm]
            v += [q, -q, -q, q]
    r.append(rows)
    c.append(rows)
    v.append(diag)
    mat = sp.coo_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(N, N))
    return mat.tocsr()


def _coefficients(fast: FastSpec, x_bar: float, grid: TorusGrid):
    y = grid.coords()
    x = np.full(grid.size, float(x_bar))
    drift = np.asarray(fast.mu_y(x, y), dtype=float).reshape(grid.size, grid.d_y)
    diffusion = np.asarray(fast.a_y(x, y), dtype=float).reshape(grid.size, grid.d_y, grid.d_y)
    return drift, diffusion


def assemble_generator(fast: FastSpec, x_bar: float, grid: TorusGrid) -> GeneratorMatrix:
    """Upwind/central discretization of the frozen fast generator at slow state ``x_bar``."""
    if fast.d_y != grid.d_y:
        raise ValueError(f"grid dimension {grid.d_y} does not match fast dimension {fast.d_y}")
    drift, diffusion = _coefficients(fast, x_bar, grid)
    eig_min = float(np.min(np.linalg.eigvalsh(0.5 * (diffusion + np.swapaxes(diffusion, 1, 2)))))
    scale = max(1.0, float(np.max(np.abs(diffusion))))
    if eig_min < -1e-12 * scale:
        raise NumericalError(f"diffusion matrix is not positive semidefinite at x={x_bar} (min eig {eig_min:.3e})")
    sign = drift >= 0
    return GeneratorMatrix(assemble_operator(drift, diffusion, grid, sign), grid, float(x_bar), sign)


def _inverse_iteration(adj: sp.csr_matrix, shift: float = 1e-8, iters: int = 50):
    n = adj.shape[0]
    lu = spla.splu((adj - shift * sp.identity(n)).tocsc())
    v = np.ones(n)
    for _ in range(iters):
        v = lu.solve(v)
        v /= np.linalg.norm(v)
    return v


def solve_invariant_density(fast: FastSpec, x_bar: float, grid: TorusGrid, tol: float = 1e-10,
                            generator: Optional[GeneratorMatrix] = None) -> DensityField:
    """Normalized positive null vector of the discrete adjoint generator."""
    gen = generator if generator is not None else assemble_generator(fast, x_bar, grid)
    adj = gen.adjoint
    N = grid.size
    system = adj.tolil()
    system[0, :] = np.full(N, grid.cell_volume)
    rhs = np.zeros(N)
    rhs[0] = 1.0
    scale = float(abs(adj).sum(axis=1).max())
    # Solver tolerance: the requested one, floored at rounding level of the operator.
    limit = max(tol, 1e3 * np.finfo(float).eps * scale)
    with np.errstate(all="ignore"):
        rho = spla.spsolve(system.tocsc(), rhs)
    residual = float(np.max(np.abs(adj @ rho))) if np.all(np.isfinite(rho)) else np.inf
    if not residual <= limit:
        log.warning("direct density solve at x=%g left residual %.3e; falling back to inverse iteration",
                    x_bar, residual)
        rho = _inverse_iteration(adj)
        rho /= grid.integrate(rho)
        residual = float(np.max(np.abs(adj @ rho)))
        if not residual <= limit:
            raise NumericalError(f"invariant density at x={x_bar} did not converge (residual {residual:.3e})")
    if np.min(rho) <= 0:
        raise NumericalError(
            f"nonpositive invariant density at x={x_bar} (min {np.min(rho):.3e}); "
            "the stencil is not monotone on this grid"
        )
    mass = grid.integrate(rho)
    if abs(mass - 1.0) > max(tol, 1e-12):
        raise NumericalError(f"density normalization off by {mass - 1.0:.3e} at x={x_bar}")
    return DensityField(grid, rho.reshape(grid.shape), float(x_bar), residual)


def density_sweep(fast: FastSpec, x_grid, grid: TorusGrid, tol: float = 1e-10, executor=None) -> list:
    """Invariant densities at every slow node, in input order."""
    xs = [float(x) for x in x_grid]

    def one(x):
        try:
            return solve_invariant_density(fast, x, grid, tol)
        except NumericalError as exc:
            raise NumericalError(f"density sweep failed at x={x}: {exc}") from exc

    if executor is None:
        return [one(x) for x in xs]
    return list(executor.map(one, xs))


@dataclass
class DerivativeCheck:
    derivative: DensityField
    residual: float
    integral: float


def fd_parameter_derivative(fast: FastSpec, x_bar: float, step: float, grid: TorusGrid,
                            alpha: Optional[float] = None, scheme: str = "forward",
                            tol: float = 1e-12, coef_step: float = 1e-6) -> DerivativeCheck:
    """Difference quotient of the density in the slow parameter and its derivative-equation residual.

    The residual is ``|| L*(x) q + f ||_inf`` where ``q`` is the quotient and
    ``f = (d_x L)^T rho``, the slow derivative of the discrete generator (upwind
    direction frozen at ``x_bar``) applied adjointly to the density.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if scheme not in ("forward", "central"):
        raise ValueError(f"unknown difference scheme {scheme!r}")
    if alpha is not None:
        lo = x_bar - step if scheme == "central" else x_bar
        if lo < -alpha or x_bar + step > alpha:
            raise ValueError(f"step {step} leaves the slow domain [-{alpha}, {alpha}] from x={x_bar}")
    rho0 = solve_invariant_density(fast, x_bar, grid, tol)
    rho_p = solve_invariant_density(fast, x_bar + step, grid, tol)
    if scheme == "forward":
        q = (rho_p.values - rho0.values) / step
    else:
        rho_m = solve_invariant_density(fast, x_bar - step, grid, tol)
        q = (rho_p.values - rho_m.values) / (2.0 * step)

    gen = assemble_generator(fast, x_bar, grid)
    dp, ap = _coefficients(fast, x_bar + coef_step, grid)
    dm, am = _coefficients(fast, x_bar - coef_step, grid)
    d_drift = (dp - dm) / (2.0 * coef_step)
    d_diff = (ap - am) / (2.0 * coef_step)
    d_gen = assemble_operator(d_drift, d_diff, grid, gen.drift_sign)
    forcing = d_gen.T @ rho0.values.ravel()
    residual = float(np.max(np.abs(gen.adjoint @ q.ravel() + forcing)))
    field = DensityField(grid, q, float(x_bar), residual)
    return DerivativeCheck(field, residual, grid.integrate(q))


def occupation_measure_mc(fast: FastSpec, x_bar: float, T: float, dt: float, seed, grid: TorusGrid,
                          n_chains: int = 1, burn_in: float = 0.0) -> DensityField:
    """Histogram density of Euler-Maruyama fast paths wrapped onto the torus.

    The total simulated time ``T`` is split across ``n_chains`` independent chains that
    advance together; each starts at a uniform point and discards ``burn_in`` time units.
    Bins are centred on the grid nodes so the result compares node-by-node with a density.
    """
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    rng = np.random.default_rng(seed)
    d, n = grid.d_y, grid.n
    steps = int(round(T / (dt * n_chains)))
    skip = int(round(burn_in / dt))
    y = rng.uniform(0.0, 1.0, (n_chains, d))
    x = np.full(n_chains, float(x_bar))
    counts = np.zeros(grid.size, dtype=np.int64)
    sqrt_dt = np.sqrt(dt)
    a0 = np.asarray(fast.a_y(x, y))
    constant_diffusion = bool(np.all(a0 == a0[:1]))
    chol = _psd_sqrt(a0)
    for k in range(skip + steps):
        drift = fast.mu_y(x, y)
        if not constant_diffusion:
            chol = _psd_sqrt(fast.a_y(x, y))
        dw = rng.standard_normal((n_chains, d)) * sqrt_dt
        y = y + drift * dt + np.einsum("cij,cj->ci", chol, dw)
        y -= np.floor(y)
        if k >= skip:
            cell = np.floor(y * n + 0.5).astype(np.int64) % n
            counts += np.bincount(grid.index(cell), minlength=grid.size)
    total = counts.sum()
    values = counts.reshape(grid.shape) / (total * grid.cell_volume)
    return DensityField(grid, values, float(x_bar), np.nan)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a stack of PSD matrices (handles singular ones)."""
    w, v = np.linalg.eigh(a)
    return np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(np.clip(w, 0.0, None)), v)
