"""Parabolic cell problem on the torus and long-time estimates of the effective Hamiltonian."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .homogenize import HamiltonianPoint, sc_minimum
from .model import ControlBox, FastSpec, SlowSpec
from .torus import TorusGrid, _psd_sqrt, assemble_generator

__all__ = [
    "CellSolution",
    "frozen_running_hamiltonian",
    "solve_cell_t",
    "effective_hamiltonian_longtime",
    "feynman_kac_mc",
]


def frozen_running_hamiltonian(p: HamiltonianPoint, slow: SlowSpec, control: ControlBox, y,
                               form: str = "split"):
    """Pointwise Hamiltonian of the slow generator at frozen ``(x_bar, g, H)`` as a function of ``y``.

    ``form="split"`` adds the control minimum to the fast-dependent terms; ``form="direct"``
    evaluates the whole bracket at the minimizing control.
    """
    y = np.asarray(y, dtype=float)
    x = np.full(y.shape[:-1], float(p.x_bar))
    if form == "split":
        sf = slow.mu_sf(x, y) * p.g + 0.5 * slow.a_sf(x, y) * p.H + slow.l_sf(x, y)
        return sf + sc_minimum(x, p.g, p.H, slow, control)
    if form == "direct":
        q = slow.quadratic
        if q is None:
            raise ValueError("the direct form needs the quadratic control structure")
        u = np.clip(0.5 * q.f(x, p.g, p.H), control.lo[0], control.hi[0])
        mu = slow.mu_sf(x, y) + slow.mu_sc(x, u)
        a = slow.sigma_sf(x, y) ** 2 + slow.sigma_sc(x, u) ** 2 + 2 * slow.sigma_sf(x, y) * slow.sigma_sc(x, u)
        return mu * p.g + 0.5 * a * p.H + slow.l_sf(x, y) + slow.l_sc(x, u)
    raise ValueError(f"unknown form {form!r}")


@dataclass
class CellSolution:
    grid: TorusGrid
    times: np.ndarray
    w: np.ndarray  # (len(times),) + grid.shape
    p: HamiltonianPoint
    source: np.ndarray

    def growth(self):
        """Mean and spread over y of ``w(t)/t`` at every recorded ``t > 0``."""
        t = self.times[1:]
        ratio = self.w[1:].reshape(len(t), -1) / t[:, None]
        return t, ratio.mean(axis=1), ratio.max(axis=1) - ratio.min(axis=1)


def solve_cell_t(p: HamiltonianPoint, fast: FastSpec, slow: SlowSpec, control: ControlBox, grid: TorusGrid,
                 T: float, dt: float, record_every: int = 1, scale: float = 1.0) -> CellSolution:
    """Implicit Euler for ``w_t = G_Y w + h_p`` with ``w(0) = 0``."""
    if T < 0 or dt <= 0:
        raise ValueError("need T >= 0 and dt > 0")
    p.check(slow.alpha)
    gen = assemble_generator(fast, p.x_bar, grid).matrix
    source = scale * frozen_running_hamiltonian(p, slow, control, grid.coords())
    steps = int(round(T / dt))
    lu = spla.splu((sp.identity(grid.size) - dt * gen).tocsc())
    w = np.zeros(grid.size)
    times, snaps = [0.0], [w.copy()]
    for k in range(1, steps + 1):
        w = lu.solve(w + dt * source)
        if k % record_every == 0 or k == steps:
            times.append(k * dt)
            snaps.append(w.copy())
    return CellSolution(grid, np.array(times), np.array(snaps).reshape((-1,) + grid.shape), p,
                        source.reshape(grid.shape))


def effective_hamiltonian_longtime(p: HamiltonianPoint, fast: FastSpec, slow: SlowSpec, control: ControlBox,
                                   grid: TorusGrid, T: float = 40.0, dt: float = 0.05):
    """``(mean_y w(T)/T, max_y - min_y of w(T)/T)``."""
    if T <= 0:
        raise ValueError("T must be positive")
    sol = solve_cell_t(p, fast, slow, control, grid, T, dt, record_every=max(1, int(round(T / dt))))
    ratio = sol.w[-1] / sol.times[-1]
    return float(ratio.mean()), float(ratio.max() - ratio.min())


def feynman_kac_mc(p: HamiltonianPoint, fast: FastSpec, slow: SlowSpec, control: ControlBox, y0, T: float,
                   dt: float, n_paths: int, seed):
    """Monte Carlo ``E int_0^T h_p(Y_s) ds`` along Euler-Maruyama fast paths from ``y0``."""
    rng = np.random.default_rng(seed)
    d = fast.d_y
    y = np.tile(np.asarray(y0, dtype=float), (n_paths, 1))
    x = np.full(n_paths, float(p.x_bar))
    steps = int(round(T / dt))
    total = np.zeros(n_paths)
    sq = np.sqrt(dt)
    for _ in range(steps):
        total += frozen_running_hamiltonian(p, slow, control, y) * dt
        root = _psd_sqrt(fast.a_y(x, y))
        y = y + fast.mu_y(x, y) * dt + np.einsum("nij,nj->ni", root, rng.standard_normal((n_paths, d)) * sq)
        y -= np.floor(y)
    stderr = float(total.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return float(total.mean()), stderr
