"""Scenario configuration, the two built-in example models and structural checks.

Fields evaluate on numpy arrays: slow positions ``x`` have shape ``(...)`` and
fast positions ``y`` have shape ``(..., d_y)``; the leading axes broadcast.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "ControlBox",
    "QuadraticControl",
    "SlowSpec",
    "FastSpec",
    "HypothesisCheck",
    "ValidationReport",
    "load_scenario",
    "build_example",
    "validate_structure",
    "constraint_phi",
]

TWO_PI = 2.0 * np.pi


class ConfigError(ValueError):
    """Raised for malformed scenario files or violated parameter invariants."""


def _parse_float_list(text: str) -> tuple:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


# (section, key) -> (type, default); ``None`` default marks a required key.
_SCHEMA = {
    "model": {
        "example_id": (int, None),
        "theta_a": (float, None),
        "theta_b": (float, None),
        "theta_c": (float, None),
        "theta_d": (float, None),
        "theta_e": (float, None),
        "sigma_x": (float, None),
        "sigma_y": (float, None),
        "alpha": (float, None),
        "beta": (float, None),
        "u_lo": (float, 0.0),
        "u_hi": (float, 1.0),
        "epsilon_list": (_parse_float_list, (0.4, 0.2, 0.1, 0.05)),
        "d_y": (int, 2),
        "fast_diffusion_structure": (str, "diagonal"),
        "slow_fast_correlation": (float, 0.0),
    },
    "grids": {
        "n_slow": (int, 65),
        "n_torus": (int, 32),
        "n_control": (int, 201),
        "cell_T": (float, 40.0),
        "cell_dt": (float, 0.05),
    },
    "mc": {
        "mc_paths": (int, 10_000),
        "mc_dt": (float, 0.01),
        "mc_horizon": (float, 0.0),
        "mc_epsilon": (float, 0.2),
        "seed": (int, 0),
        "occupation_T": (float, 2.0e4),
        "occupation_dt": (float, 1.0e-3),
    },
    "tolerances": {
        "tol_pde": (float, 1e-8),
        "tol_policy": (float, 1e-10),
        "tol_density": (float, 1e-10),
        "tol_mc": (float, 1e-3),
    },
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Every scalar parameter of one experiment.

    ``mc_horizon = 0`` means "derive the horizon from the discount truncation rule".
    """

    example_id: int
    theta_a: float
    theta_b: float
    theta_c: float
    theta_d: float
    theta_e: float
    sigma_x: float
    sigma_y: float
    alpha: float
    beta: float
    u_lo: float = 0.0
    u_hi: float = 1.0
    epsilon_list: tuple = (0.4, 0.2, 0.1, 0.05)
    d_y: int = 2
    fast_diffusion_structure: str = "diagonal"
    slow_fast_correlation: float = 0.0
    n_slow: int = 65
    n_torus: int = 32
    n_control: int = 201
    cell_T: float = 40.0
    cell_dt: float = 0.05
    mc_paths: int = 10_000
    mc_dt: float = 0.01
    mc_horizon: float = 0.0
    mc_epsilon: float = 0.2
    seed: int = 0
    occupation_T: float = 2.0e4
    occupation_dt: float = 1.0e-3
    tol_pde: float = 1e-8
    tol_policy: float = 1e-10
    tol_density: float = 1e-10
    tol_mc: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "epsilon_list", tuple(float(e) for e in self.epsilon_list))
        self._check()

    def _check(self):
        if self.example_id not in (1, 2):
            raise ConfigError(f"example_id: unknown example {self.example_id} (expected 1 or 2)")
        if self.u_lo > self.u_hi:
            raise ConfigError(f"u_lo/u_hi: empty control box [{self.u_lo}, {self.u_hi}]")
        if self.example_id == 2 and self.u_lo < 0:
            raise ConfigError("u_lo: negative control with √u diffusion (example 2 needs u_lo >= 0)")
        for name in ("sigma_x", "sigma_y", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        eps = self.epsilon_list
        if not eps:
            raise ConfigError("epsilon_list: must not be empty")
        if any(not (0.0 < e < 1.0) for e in eps):
            raise ConfigError(f"epsilon_list: every value must lie in (0, 1), got {eps}")
        if any(a <= b for a, b in zip(eps, eps[1:])):
            raise ConfigError(f"epsilon_list: must be strictly decreasing, got {eps}")
        if not 0.0 < self.mc_epsilon < 1.0:
            raise ConfigError(f"mc_epsilon: must lie in (0, 1), got {self.mc_epsilon}")
        if self.n_slow < 3:
            raise ConfigError(f"n_slow: need at least 3 points, got {self.n_slow}")
        if self.n_torus < 4:
            raise ConfigError(f"n_torus: need at least 4 points, got {self.n_torus}")
        if self.n_control < 2:
            raise ConfigError(f"n_control: need at least 2 points, got {self.n_control}")
        if self.d_y < 1:
            raise ConfigError(f"d_y: must be >= 1, got {self.d_y}")
        if self.fast_diffusion_structure not in ("diagonal", "rank_one"):
            raise ConfigError(
                f"fast_diffusion_structure: expected 'diagonal' or 'rank_one', "
                f"got {self.fast_diffusion_structure!r}"
            )
        if not -1.0 <= self.slow_fast_correlation <= 1.0:
            raise ConfigError("slow_fast_correlation: must lie in [-1, 1]")
        if self.example_id == 2 and self.slow_fast_correlation != 0.0:
            raise ConfigError("slow_fast_correlation: only supported for example 1")
        for name in ("mc_paths",):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("mc_dt", "cell_T", "cell_dt", "occupation_T", "occupation_dt",
                     "tol_pde", "tol_policy", "tol_density", "tol_mc"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.mc_horizon < 0:
            raise ConfigError("mc_horizon: must be >= 0 (0 selects the automatic horizon)")

    @property
    def control(self) -> "ControlBox":
        return ControlBox(np.array([self.u_lo]), np.array([self.u_hi]))

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        """Short stable hash of every field value."""
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in dataclasses.fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        """Render as a scenario file that ``load_scenario`` reads back unchanged."""
        lines = []
        for section, keys in _SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                value = getattr(self, key)
                if isinstance(value, tuple):
                    value = ", ".join(repr(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def load_scenario(text: str) -> ScenarioConfig:
    """Parse a ``key = value`` scenario document with ``[model]``-style sections."""
    parser = configparser.ConfigParser(
        delimiters=("=",),
        comment_prefixes=("#",),
        inline_comment_prefixes=("#",),
        interpolation=None,
        default_section="__unused__",
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else "?"
        raise ConfigError(f"parse error at line {lineno}: {exc.errors[0][1].strip() if exc.errors else exc}") from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"parse error at line {exc.lineno}: key/value line before any [section]") from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"parse error at line {exc.lineno}: {exc.message}") from exc

    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{key}: unknown key in [{section}]")
            kind, _ = _SCHEMA[section][key]
            try:
                values[key] = kind(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw.strip()!r} ({exc})") from exc
    for section, keys in _SCHEMA.items():
        for key, (_, default) in keys.items():
            if key not in values and default is None:
                raise ConfigError(f"{key}: required key missing from [{section}]")
    return ScenarioConfig(**values)


@dataclass(frozen=True)
class ControlBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("control box bounds must have the same shape")
        if np.any(lo > hi):
            raise ValueError("empty control box")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def grid(self, n: int) -> np.ndarray:
        """Uniform control grid for scalar boxes."""
        if self.dim != 1:
            raise NotImplementedError("control grids are only built for scalar controls")
        return np.linspace(self.lo[0], self.hi[0], n)

    def clip(self, u):
        return np.clip(u, self.lo[0], self.hi[0])


@dataclass(frozen=True)
class QuadraticControl:
    """Control-dependent parts of the form used by both examples.

    mu_SC = drift_coef * u,  sigma_SC^2 = var_coef(x) * u,  L_SC = (target - u)^2,
    so the bracket minimised over u is ``u^2 - f u + target^2`` with
    ``f = 2 target - drift_coef g - var_coef(x) H / 2``.
    """

    drift_coef: float
    var_coef: Callable
    target: float

    def f(self, x, g, H):
        return 2.0 * self.target - self.drift_coef * g - 0.5 * self.var_coef(x) * H


@dataclass(frozen=True)
class SlowSpec:
    alpha: float
    mu_sf: Callable
    mu_sc: Callable
    sigma_sf: Callable
    sigma_sc: Callable
    l_sf: Callable
    l_sc: Callable
    h_minus: float
    h_plus: float
    quadratic: Optional[QuadraticControl] = None

    def a_sf(self, x, y):
        return self.sigma_sf(x, y) ** 2

    def a_sc(self, x, u):
        return self.sigma_sc(x, u) ** 2

    def phi(self, x):
        return constraint_phi(x, self.alpha)

    def with_cost_shift(self, delta: float) -> "SlowSpec":
        """Same model with ``delta`` added to the running cost."""
        base = self.l_sf
        return dataclasses.replace(self, l_sf=lambda x, y: base(x, y) + delta)

    def with_boundary_cost(self, h_minus: float, h_plus: float) -> "SlowSpec":
        return dataclasses.replace(self, h_minus=h_minus, h_plus=h_plus)


@dataclass(frozen=True)
class FastSpec:
    """Frozen fast dynamics: drift ``mu_y`` and diffusion matrix ``a_y`` (= sigma_Y sigma_Y^T).

    ``xy_cov(x, y)`` is the slow/fast noise covariance sigma_X sigma_Y^T (shape ``(..., d_y)``);
    ``None`` means independent noises.
    """

    d_y: int
    mu_y: Callable
    a_y: Callable
    ellipticity_floor: float
    xy_cov: Optional[Callable] = None
    structure: str = "diagonal"

    def with_drift_scale(self, scale: float) -> "FastSpec":
        base = self.mu_y
        return dataclasses.replace(self, mu_y=lambda x, y: scale * base(x, y))


def constraint_phi(x, alpha: float):
    """Return ``(phi(x), phi'(x))`` for phi(x) = e^{a^2-x^2} (x^2-a^2) / (2a)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=float)
    damp = np.exp(alpha**2 - x**2)
    value = damp * (x**2 - alpha**2) / (2.0 * alpha)
    deriv = (x / alpha) * damp * (1.0 + alpha**2 - x**2)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def _ones_like_x(x, y):
    return np.ones(np.broadcast_shapes(np.shape(x), np.shape(y)[:-1]))


def build_example(cfg: ScenarioConfig):
    """Construct ``(SlowSpec, FastSpec)`` for example 1 or 2 of the configuration."""
    ta, tb, tc, td, te = cfg.theta_a, cfg.theta_b, cfg.theta_c, cfg.theta_d, cfg.theta_e
    sx, sy = cfg.sigma_x, cfg.sigma_y
    if cfg.d_y != 2:
        raise ConfigError(f"d_y: the built-in examples have a two-dimensional fast variable, got {cfg.d_y}")

    def mu_sf(x, y):
        y = np.asarray(y, dtype=float)
        return ta * np.asarray(x) * np.sin(TWO_PI * y[..., 0]) * np.sin(TWO_PI * y[..., 1])

    def mu_sc(x, u):
        return -tb * np.asarray(u, dtype=float) + 0.0 * np.asarray(x)

    def l_sf(x, y):
        return 0.0 * _ones_like_x(x, y)

    def l_sc(x, u):
        return (td - np.asarray(u, dtype=float)) ** 2 + 0.0 * np.asarray(x)

    if cfg.example_id == 1:
        def sigma_sf(x, y):
            return sx * np.asarray(x, dtype=float) * _ones_like_x(x, y)

        def sigma_sc(x, u):
            return 0.0 * np.asarray(x, dtype=float) * np.asarray(u, dtype=float)

        quad = QuadraticControl(drift_coef=-tb, var_coef=lambda x: 0.0 * np.asarray(x, dtype=float), target=td)
    elif cfg.example_id == 2:
        def sigma_sf(x, y):
            return 0.0 * _ones_like_x(x, y)

        def sigma_sc(x, u):
            return sx * np.sqrt(np.asarray(u, dtype=float)) * np.asarray(x, dtype=float)

        quad = QuadraticControl(drift_coef=-tb, var_coef=lambda x: sx**2 * np.asarray(x, dtype=float) ** 2, target=td)
    else:
        raise ConfigError(f"example_id: unknown example {cfg.example_id}")

    slow = SlowSpec(
        alpha=cfg.alpha, mu_sf=mu_sf, mu_sc=mu_sc, sigma_sf=sigma_sf, sigma_sc=sigma_sc,
        l_sf=l_sf, l_sc=l_sc, h_minus=te, h_plus=te, quadratic=quad,
    )

    def mu_y(x, y):
        y = np.asarray(y, dtype=float)
        s = tc * np.asarray(x) * np.cos(TWO_PI * (y[..., 0] - y[..., 1]))
        return np.stack([s, s], axis=-1)

    if cfg.fast_diffusion_structure == "diagonal":
        a_const = sy**2 * np.eye(2)
        floor = sy**2
        direction = np.ones(2) / np.sqrt(2.0)
    else:
        a_const = sy**2 * np.ones((2, 2))
        floor = 0.0
        direction = np.ones(2)

    def a_y(x, y):
        shape = np.broadcast_shapes(np.shape(x), np.shape(y)[:-1])
        return np.broadcast_to(a_const, shape + (2, 2)).copy()

    xy_cov = None
    r = cfg.slow_fast_correlation
    if r != 0.0:
        def xy_cov(x, y):
            return r * sy * sigma_sf(x, y)[..., None] * direction

    fast = FastSpec(d_y=2, mu_y=mu_y, a_y=a_y, ellipticity_floor=floor, xy_cov=xy_cov,
                    structure=cfg.fast_diffusion_structure)
    return slow, fast


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    worst: float
    note: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        return "\n".join(
            f"{c.name:<24s} {'pass' if c.passed else 'FAIL'}  worst={c.worst:.3e}  {c.note}".rstrip()
            for c in self.checks
        )


def _divergence_condition(fast: FastSpec, x, y, step=1e-4):
    """(1/2) sum d2_{ij} a_ij - sum d_i mu_i by central differences in y."""
    d = fast.d_y
    total = np.zeros(np.shape(x))
    eye = np.eye(d) * step
    for i in range(d):
        mp = fast.mu_y(x, y + eye[i])[..., i]
        mm = fast.mu_y(x, y - eye[i])[..., i]
        total -= (mp - mm) / (2 * step)
        for j in range(d):
            app = fast.a_y(x, y + eye[i] + eye[j])[..., i, j]
            apm = fast.a_y(x, y + eye[i] - eye[j])[..., i, j]
            amp = fast.a_y(x, y - eye[i] + eye[j])[..., i, j]
            amm = fast.a_y(x, y - eye[i] - eye[j])[..., i, j]
            total += 0.5 * (app - apm - amp + amm) / (4 * step**2)
    return total


def validate_structure(slow: SlowSpec, fast: FastSpec, n_samples: int = 256, seed=0,
                       control: Optional[ControlBox] = None, tol: float = 1e-10) -> ValidationReport:
    """Sample the structural hypotheses on the slow/fast model.

    The report carries the worst sampled violation for every check; nothing raises.
    """
    rng = np.random.default_rng(seed)
    alpha = slow.alpha
    if control is None:
        control = ControlBox(np.array([0.0]), np.array([1.0]))
    x = rng.uniform(-alpha, alpha, n_samples)
    y = rng.uniform(0.0, 1.0, (n_samples, fast.d_y))
    u = rng.uniform(control.lo[0], control.hi[0], n_samples)
    report = ValidationReport()

    worst = 0.0
    for i in range(fast.d_y):
        shifted = y.copy()
        shifted[:, i] += 1.0
        for fn in (slow.mu_sf, slow.sigma_sf, slow.l_sf):
            worst = max(worst, float(np.max(np.abs(fn(x, shifted) - fn(x, y)))))
        worst = max(worst, float(np.max(np.abs(fast.mu_y(x, shifted) - fast.mu_y(x, y)))))
        worst = max(worst, float(np.max(np.abs(fast.a_y(x, shifted) - fast.a_y(x, y)))))
    report.checks.append(HypothesisCheck("periodicity", worst <= 1e-12, worst))

    prod = slow.sigma_sc(x, u) * slow.sigma_sf(x, y)
    nc = float(np.max(np.abs(2.0 * prod)))
    report.checks.append(HypothesisCheck("non_correlation", nc <= tol, nc))

    a = fast.a_y(x, y)
    sym = float(np.max(np.abs(a - np.swapaxes(a, -1, -2))))
    min_eig = float(np.min(np.linalg.eigvalsh(a)))
    floor = fast.ellipticity_floor
    ok = sym <= 1e-12 and floor > 0 and min_eig >= floor * (1 - 1e-12)
    report.checks.append(HypothesisCheck(
        "uniform_ellipticity", ok, min_eig, note=f"min eigenvalue, floor c0={floor:g}"))

    div = _divergence_condition(fast, x, y)
    worst_div = float(np.max(div))
    sign = "<=0" if worst_div <= 1e-6 else ">0"
    report.checks.append(HypothesisCheck(
        "divergence_condition", worst_div <= 1e-6, float(np.max(np.abs(div))),
        note=f"sampled max of expression {worst_div:.2e} ({sign})"))

    # Lipschitz-control structure: D2_u mu = 0, D2_u sigma^2 = 0, D2_u L > 0.
    du = 1e-3 * max(control.hi[0] - control.lo[0], 1.0)
    uc = np.clip(u, control.lo[0] + du, control.hi[0] - du) if control.hi[0] - control.lo[0] > 2 * du else u
    def second(fn):
        return (fn(x, uc + du) - 2 * fn(x, uc) + fn(x, uc - du)) / du**2
    if control.lo[0] - du < 0 and slow.quadratic is not None and np.any(slow.quadratic.var_coef(x) != 0):
        uc = np.clip(uc, du, None)
    d2_mu = float(np.max(np.abs(second(slow.mu_sc))))
    d2_a = float(np.max(np.abs(second(slow.a_sc))))
    d2_l = float(np.min(second(slow.l_sc)))
    ok = d2_mu <= 1e-6 and d2_a <= 1e-6 and d2_l > 0
    report.checks.append(HypothesisCheck(
        "control_convexity", ok, d2_l, note=f"|D2u mu|={d2_mu:.1e} |D2u a|={d2_a:.1e}"))

    xs = np.linspace(-alpha, alpha, 203)[1:-1]
    val, _ = constraint_phi(xs, alpha)
    vb, db = constraint_phi(np.array([-alpha, alpha]), alpha)
    worst_phi = max(float(np.max(np.abs(vb))), float(np.max(np.abs(np.abs(db) - 1.0))))
    ok = bool(np.all(val < 0)) and worst_phi <= 1e-12
    report.checks.append(HypothesisCheck("constraint_function", ok, worst_phi))
    return report
