"""Effective coefficients by quadrature against the invariant density."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .hjb import minimize_hamiltonian_grid, minimize_quadratic_control
from .model import ControlBox, FastSpec, SlowSpec
from .torus import DensityField, TorusGrid, density_sweep

__all__ = [
    "EffectiveTables",
    "HamiltonianPoint",
    "effective_tables",
    "effective_tables_for",
    "effective_hamiltonian_quadrature",
    "sc_minimum",
    "lipschitz_probe",
]

TWO_PI = 2.0 * np.pi
_COLUMNS = ("x", "mu_bar", "a_bar", "l_bar", "kappa")


@dataclass
class EffectiveTables:
    x_nodes: np.ndarray
    mu_bar: np.ndarray
    a_bar: np.ndarray
    l_bar: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        for name in _COLUMNS[1:] + ("x_nodes",):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.x_nodes.size
        if any(getattr(self, c).size != n for c in _COLUMNS[1:]):
            raise ValueError("effective tables have mismatched lengths")

    @property
    def sigma_bar(self) -> np.ndarray:
        return np.sqrt(np.clip(self.a_bar, 0.0, None))

    def at(self, x):
        """Linear interpolation of ``(mu_bar, a_bar, l_bar)`` at ``x``."""
        return tuple(np.interp(x, self.x_nodes, getattr(self, c)) for c in ("mu_bar", "a_bar", "l_bar"))

    def rows(self):
        return np.column_stack([self.x_nodes, self.mu_bar, self.a_bar, self.l_bar, self.kappa])

    @staticmethod
    def columns():
        return _COLUMNS

    @classmethod
    def from_csv(cls, text: str) -> "EffectiveTables":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.reader(io.StringIO("\n".join(lines)))
        header = next(reader)
        if tuple(header) != _COLUMNS:
            raise ValueError(f"unexpected effective-table header {header}")
        data = np.array([[float(v) for v in row] for row in reader])
        return cls(*data.T)


@dataclass(frozen=True)
class HamiltonianPoint:
    x_bar: float
    g: float
    H: float

    def check(self, alpha: float) -> "HamiltonianPoint":
        if not -alpha <= self.x_bar <= alpha:
            raise ValueError(f"x_bar={self.x_bar} outside [-{alpha}, {alpha}]")
        return self


def _kappa_nodes(grid: TorusGrid) -> np.ndarray:
    y = grid.coords()
    return (np.sin(TWO_PI * y[:, 0]) * np.sin(TWO_PI * y[:, 1])) if grid.d_y >= 2 else np.zeros(grid.size)


def effective_tables(slow: SlowSpec, densities, x_nodes) -> EffectiveTables:
    x_nodes = np.asarray(x_nodes, dtype=float)
    if len(densities) != x_nodes.size:
        raise ValueError(f"{len(densities)} densities for {x_nodes.size} slow nodes")
    cols = {c: np.empty(x_nodes.size) for c in _COLUMNS[1:]}
    for i, (x, rho) in enumerate(zip(x_nodes, densities)):
        if not np.isclose(rho.x_bar, x, rtol=0, atol=1e-12):
            raise ValueError(f"density solved at {rho.x_bar} paired with slow node {x}")
        y = rho.grid.coords()
        xs = np.full(rho.grid.size, x)
        cols["mu_bar"][i] = rho.integrate(slow.mu_sf(xs, y))
        cols["a_bar"][i] = rho.integrate(slow.a_sf(xs, y))
        cols["l_bar"][i] = rho.integrate(slow.l_sf(xs, y))
        cols["kappa"][i] = rho.integrate(_kappa_nodes(rho.grid))
    return EffectiveTables(x_nodes, **cols)


def effective_tables_for(slow: SlowSpec, fast: FastSpec, n_slow: int, grid: TorusGrid, tol: float = 1e-10,
                         executor=None) -> EffectiveTables:
    x_nodes = np.linspace(-slow.alpha, slow.alpha, n_slow)
    return effective_tables(slow, density_sweep(fast, x_nodes, grid, tol, executor), x_nodes)


def sc_minimum(x, g, H, slow: SlowSpec, control: ControlBox, n_u: int = 100_001):
    """``min_u { mu_SC g + a_SC H / 2 + L_SC }`` (closed form when available)."""
    q = slow.quadratic
    if q is not None:
        _, val = minimize_quadratic_control(q.f(x, g, H), control)
        return val + q.target**2
    return minimize_hamiltonian_grid(x, g, H, slow, control, n_u)[1]


def effective_hamiltonian_quadrature(p: HamiltonianPoint, slow: SlowSpec, density: DensityField,
                                     control: ControlBox) -> float:
    p.check(slow.alpha)
    y = density.grid.coords()
    xs = np.full(density.grid.size, p.x_bar)
    mu = density.integrate(slow.mu_sf(xs, y))
    a = density.integrate(slow.a_sf(xs, y))
    l = density.integrate(slow.l_sf(xs, y))
    return float(sc_minimum(p.x_bar, p.g, p.H, slow, control) + mu * p.g + 0.5 * a * p.H + l)


def lipschitz_probe(tables: EffectiveTables) -> dict:
    """Largest finite-difference slope of every table column."""
    x = tables.x_nodes
    if x.size < 2:
        raise ValueError("need at least 2 nodes")
    dx = np.diff(x)
    return {c: float(np.max(np.abs(np.diff(getattr(tables, c)) / dx))) for c in _COLUMNS[1:]}
