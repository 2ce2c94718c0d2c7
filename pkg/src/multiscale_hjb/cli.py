"""Command-line pipeline: density -> homogenize -> solvers -> convergence -> Monte Carlo -> report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .cell import solve_cell_t
from .homogenize import EffectiveTables, HamiltonianPoint, effective_tables, effective_hamiltonian_quadrature
from .hjb import (PolicyField, ValueField1D, ValueField3D, check_neumann, convergence_study, solve_effective_hjb,
                  solve_multiscale_hjb, sup_running_cost)
from .model import ConfigError, ScenarioConfig, build_example, load_scenario
from .sde import auto_horizon, policy_from_field, simulate_effective_cost, simulate_multiscale_cost
from .torus import DensityField, NumericalError, TorusGrid, density_sweep, solve_invariant_density

log = logging.getLogger("multiscale_hjb")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4

STAGES = ("density", "homogenize", "cell", "solve-effective", "solve-multiscale", "converge", "simulate")
DEPENDS = {
    "density": (),
    "homogenize": ("density",),
    "cell": (),
    "solve-effective": ("homogenize",),
    "solve-multiscale": (),
    "converge": ("solve-effective",),
    "simulate": ("solve-effective", "solve-multiscale"),
}
OUTPUTS = {
    "density": "density_sweep.csv",
    "homogenize": "effective_tables.csv",
    "cell": "cell_growth.csv",
    "solve-effective": "value_effective.csv",
    "solve-multiscale": "value_multiscale.csv",
    "converge": "convergence.csv",
    "simulate": "simulate.csv",
}
SLICES_FILE = "convergence_slices.csv"
MANIFEST = "manifest.json"


class DependencyError(RuntimeError):
    pass


# --------------------------------------------------------------------------- csv helpers

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    return str(value)


def write_csv(path: Path, columns, rows, scenario_hash: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# scenario_hash={scenario_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: Path):
    """Return ``(columns, list of row-lists as strings, scenario_hash)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    digest = ""
    body = []
    for ln in lines:
        if ln.startswith("#"):
            if ln.startswith("# scenario_hash="):
                digest = ln.split("=", 1)[1]
            continue
        if ln:
            body.append(ln)
    rows = list(csv.reader(body))
    return rows[0], rows[1:], digest


def read_numeric(path: Path):
    cols, rows, digest = read_csv(path)
    return cols, np.array([[float(v) for v in r] for r in rows]).reshape(-1, len(cols)), digest


# --------------------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    scenario_hash: str
    tool_version: str
    stages: list = field(default_factory=list)

    def record(self, name, inputs, outputs, wall_clock, info=None):
        self.stages = [s for s in self.stages if s["name"] != name]
        self.stages.append({"name": name, "inputs": sorted(inputs), "outputs": sorted(outputs),
                            "wall_clock_s": wall_clock, "info": info or {}})

    def save(self, out_dir: Path):
        (out_dir / MANIFEST).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, out_dir: Path, scenario_hash: str = "") -> "RunManifest":
        path = out_dir / MANIFEST
        if path.exists():
            data = json.loads(path.read_text())
            if not scenario_hash or data.get("scenario_hash") == scenario_hash:
                return cls(data["scenario_hash"], data.get("tool_version", ""), data.get("stages", []))
        return cls(scenario_hash, _version())

    def stage(self, name):
        for s in self.stages:
            if s["name"] == name:
                return s
        return None


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# --------------------------------------------------------------------------- context

class Context:
    def __init__(self, cfg: ScenarioConfig, out_dir: Path, threads: int = 1, auto_deps: bool = False,
                 timing: bool = False):
        self.cfg = cfg
        self.out_dir = out_dir
        self.threads = max(1, threads)
        self.auto_deps = auto_deps
        self.timing = timing
        self.hash = cfg.digest()
        self.slow, self.fast = build_example(cfg)
        self.grid = TorusGrid(cfg.d_y, cfg.n_torus)
        self.control = cfg.control
        out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.load(out_dir, self.hash)
        self.manifest.scenario_hash = self.hash
        self.manifest.tool_version = _version()
        self.checks = []

    def path(self, stage) -> Path:
        return self.out_dir / OUTPUTS[stage]

    def x_nodes(self):
        return np.linspace(-self.cfg.alpha, self.cfg.alpha, self.cfg.n_slow)

    def require(self, stage):
        path = self.path(stage)
        ok = path.exists() and read_csv(path)[2] == self.hash
        if not ok:
            if not self.auto_deps:
                raise DependencyError(
                    f"missing output of stage '{stage}' ({path.name}) for this scenario; "
                    f"run it first or pass --auto-deps")
            run_stage(self, stage)
        return path

    def check(self, name, passed, detail=""):
        self.checks.append((name, bool(passed), detail))


def _executor(ctx):
    return ThreadPoolExecutor(ctx.threads) if ctx.threads > 1 else None


# --------------------------------------------------------------------------- stages

def stage_density(ctx: Context, x_bar=None, n=None, out=None):
    grid = TorusGrid(ctx.cfg.d_y, n) if n else ctx.grid
    if x_bar is not None:
        rho = solve_invariant_density(ctx.fast, x_bar, grid, ctx.cfg.tol_density)
        path = Path(out) if out else ctx.out_dir / "density.csv"
        y = grid.coords()
        write_csv(path, ("y1", "y2", "rho"), zip(y[:, 0], y[:, 1], rho.values.ravel()), ctx.hash)
        ctx.check("density positive and normalized",
                  rho.values.min() > 0 and abs(rho.integral() - 1) <= ctx.cfg.tol_density)
        return [path], {"x_bar": x_bar, "residual": rho.residual}
    ex = _executor(ctx)
    try:
        dens = density_sweep(ctx.fast, ctx.x_nodes(), grid, ctx.cfg.tol_density, ex)
    finally:
        if ex:
            ex.shutdown()
    y = grid.coords()
    rows = []
    for rho in dens:
        rows.extend(zip(np.full(grid.size, rho.x_bar), y[:, 0], y[:, 1], rho.values.ravel()))
    path = Path(out) if out else ctx.path("density")
    write_csv(path, ("x", "y1", "y2", "rho"), rows, ctx.hash)
    worst = max(d.residual for d in dens)
    ctx.check("density sweep positive", all(d.values.min() > 0 for d in dens))
    return [path], {"max_residual": worst}


def _load_densities(ctx: Context):
    _, data, _ = read_numeric(ctx.require("density"))
    xs = np.unique(data[:, 0])
    n = int(round(np.sqrt(np.sum(data[:, 0] == xs[0]))))
    grid = TorusGrid(2, n)
    out = []
    for x in ctx.x_nodes():
        block = data[np.isclose(data[:, 0], x, rtol=0, atol=1e-13)]
        if block.shape[0] != grid.size:
            raise DependencyError(f"density sweep has no slice for x={x}; rerun the density stage")
        out.append(DensityField(grid, block[:, 3].reshape(grid.shape), float(x)))
    return out


def _load_tables(ctx: Context) -> EffectiveTables:
    return EffectiveTables.from_csv(ctx.require("homogenize").read_text())


def stage_homogenize(ctx: Context, out=None):
    dens = _load_densities(ctx)
    tables = effective_tables(ctx.slow, dens, ctx.x_nodes())
    path = Path(out) if out else ctx.path("homogenize")
    write_csv(path, EffectiveTables.columns(), tables.rows(), ctx.hash)
    ctx.check("a_bar >= 0 and |kappa| <= 1", np.all(tables.a_bar >= 0) and np.all(np.abs(tables.kappa) <= 1))
    return [path], {}


def stage_cell(ctx: Context, x_bar=0.5, g=1.0, H=0.0, T=None, out=None):
    cfg = ctx.cfg
    T = cfg.cell_T if T is None else T
    p = HamiltonianPoint(x_bar, g, H)
    sol = solve_cell_t(p, ctx.fast, ctx.slow, ctx.control, ctx.grid, T, cfg.cell_dt,
                       record_every=max(1, int(round(1.0 / cfg.cell_dt))))
    t, mean, spread = sol.growth()
    path = Path(out) if out else ctx.path("cell")
    write_csv(path, ("t", "mean_w_over_t", "spread"), zip(t, mean, spread), ctx.hash)
    rho = solve_invariant_density(ctx.fast, x_bar, ctx.grid, cfg.tol_density)
    quad = effective_hamiltonian_quadrature(p, ctx.slow, rho, ctx.control)
    ctx.check("cell vs quadrature", abs(mean[-1] - quad) <= 1e-2 and spread[-1] <= 1e-2,
              f"diff={abs(mean[-1] - quad):.3e} spread={spread[-1]:.3e}")
    return [path], {"H_cell": float(mean[-1]), "H_quad": quad, "spread": float(spread[-1])}


def _solve_effective(ctx):
    return solve_effective_hjb(_load_tables(ctx), ctx.slow, ctx.control, ctx.cfg.beta, ctx.cfg.tol_policy,
                               n_control=ctx.cfg.n_control)


def stage_solve_effective(ctx: Context, out=None):
    vbar = _solve_effective(ctx)
    path = Path(out) if out else ctx.path("solve-effective")
    write_csv(path, ("x", "v", "policy"), zip(vbar.x_nodes, vbar.v, vbar.policy.values), ctx.hash)
    res = check_neumann(vbar, ctx.slow.h_minus, ctx.slow.h_plus)
    return [path], {"iterations": vbar.iterations, "residual": vbar.residual, "neumann_residual": res}


def _write_field3d(ctx, path, field: ValueField3D):
    y = field.grid.coords()
    M = field.grid.size
    rows = []
    flat_v = field.v.reshape(len(field.x_nodes), M)
    flat_u = field.policy.values.reshape(len(field.x_nodes), M)
    for i, x in enumerate(field.x_nodes):
        rows.extend(zip(np.full(M, x), y[:, 0], y[:, 1], flat_v[i], flat_u[i]))
    write_csv(path, ("x", "y1", "y2", "v", "policy"), rows, ctx.hash)


def _read_field3d(ctx, path) -> ValueField3D:
    _, data, _ = read_numeric(path)
    xs = np.unique(data[:, 0])
    M = data.shape[0] // xs.size
    grid = TorusGrid(2, int(round(np.sqrt(M))))
    shape = (xs.size,) + grid.shape
    return ValueField3D(xs, grid, data[:, 3].reshape(shape), PolicyField(data[:, 4].reshape(shape), ctx.control),
                        ctx.cfg.mc_epsilon, ctx.cfg.beta, float("nan"))


def stage_solve_multiscale(ctx: Context, epsilon=None, out=None):
    eps = ctx.cfg.mc_epsilon if epsilon is None else epsilon
    field = solve_multiscale_hjb(ctx.slow, ctx.fast, ctx.control, eps, ctx.cfg.beta, ctx.cfg.n_slow, ctx.grid,
                                 ctx.cfg.tol_policy, n_control=ctx.cfg.n_control)
    path = Path(out) if out else ctx.path("solve-multiscale")
    _write_field3d(ctx, path, field)
    res = check_neumann(field, ctx.slow.h_minus, ctx.slow.h_plus)
    return [path], {"epsilon": eps, "iterations": field.iterations, "residual": field.residual,
                    "neumann_residual": res, "cross_ratio": field.cross_ratio}


def stage_converge(ctx: Context, out=None):
    ctx.require("solve-effective")
    tables = _load_tables(ctx)
    rows, vbar, fields = convergence_study(ctx.cfg, tables=tables, threads=ctx.threads,
                                           slow=ctx.slow, fast=ctx.fast)
    path = Path(out) if out else ctx.path("converge")
    cols = ("epsilon", "err_inf", "err_sup") + (("runtime_s",) if ctx.timing else ())
    write_csv(path, cols, [(r.epsilon, r.err_inf, r.err_sup) + ((r.runtime_s,) if ctx.timing else ())
                           for r in rows], ctx.hash)
    slices = []
    for f in fields:
        flat = f.v.reshape(len(f.x_nodes), -1)
        slices.extend(zip(np.full(len(f.x_nodes), f.epsilon), f.x_nodes, flat.min(axis=1), flat.max(axis=1), vbar.v))
    spath = ctx.out_dir / SLICES_FILE
    write_csv(spath, ("epsilon", "x", "v_min_y", "v_max_y", "v_bar"), slices, ctx.hash)
    sup = [r.err_sup for r in rows]
    ok = all(a > b for a, b in zip(sup, sup[1:])) and sup[-1] <= 0.5 * sup[0]
    ctx.check("err_sup strictly decreasing, final <= half of initial", ok,
              " ".join(f"{e:.3e}" for e in sup))
    return [path, spath], {"err_sup": sup}


def stage_simulate(ctx: Context, which="both", x0_list=(-0.5, 0.0, 0.5), y0=(0.25, 0.75), epsilon=None,
                   paths=None, dt=None, seed=None, paths_out=None, out=None):
    cfg = ctx.cfg
    eps = cfg.mc_epsilon if epsilon is None else epsilon
    n_paths = cfg.mc_paths if paths is None else paths
    dt = cfg.mc_dt if dt is None else dt
    seed = cfg.seed if seed is None else seed
    sup_l = sup_running_cost(ctx.slow, ctx.control)
    T = cfg.mc_horizon if cfg.mc_horizon > 0 else auto_horizon(sup_l, cfg.beta, cfg.tol_mc)
    rows, costs = [], []
    if which in ("both", "effective"):
        ctx.require("solve-effective")
        tables = _load_tables(ctx)
        _, data, _ = read_numeric(ctx.path("solve-effective"))
        vbar = ValueField1D(data[:, 0], data[:, 1], PolicyField(data[:, 2], ctx.control), cfg.beta, float("nan"))
        pol = policy_from_field(vbar)
        for x0 in x0_list:
            est = simulate_effective_cost(tables, ctx.slow, pol, x0, cfg.beta, T, dt, n_paths, seed,
                                          control=ctx.control, keep_costs=paths_out is not None)
            rows.append(("effective", x0, np.nan, np.nan, est.mean, est.stderr, float(vbar(x0)), n_paths, T, dt))
            costs.append(("effective", x0, est.costs))
    if which in ("both", "multiscale"):
        if epsilon is None:
            ctx.require("solve-multiscale")
            field = _read_field3d(ctx, ctx.path("solve-multiscale"))
        else:
            field = solve_multiscale_hjb(ctx.slow, ctx.fast, ctx.control, eps, cfg.beta, cfg.n_slow, ctx.grid,
                                         cfg.tol_policy, n_control=cfg.n_control)
        pol = policy_from_field(field)
        for x0 in x0_list:
            est = simulate_multiscale_cost(ctx.slow, ctx.fast, pol, eps, x0, y0, cfg.beta, T, dt, n_paths, seed,
                                           control=ctx.control, keep_costs=paths_out is not None)
            pde = float(field.at(x0, y0)[0])
            rows.append(("multiscale", x0, y0[0], y0[1], est.mean, est.stderr, pde, n_paths, T, dt))
            costs.append(("multiscale", x0, est.costs))
    path = Path(out) if out else ctx.path("simulate")
    write_csv(path, ("which", "x0", "y0_1", "y0_2", "mc_mean", "mc_stderr", "pde_value", "n_paths", "horizon", "dt"),
              rows, ctx.hash)
    outputs = [path]
    if paths_out is not None:
        ppath = Path(paths_out)
        per = [(w, x0, k, c) for w, x0, arr in costs for k, c in enumerate(arr)]
        write_csv(ppath, ("which", "x0", "path", "cost"), per, ctx.hash)
        outputs.append(ppath)
    for r in rows:
        diff = abs(r[4] - r[6])
        ctx.check(f"MC vs PDE ({r[0]}, x0={r[1]:g})", diff <= 3 * r[5] + 0.02, f"diff={diff:.3e} se={r[5]:.2e}")
    return outputs, {"horizon": T}


STAGE_FUNCS = {
    "density": stage_density,
    "homogenize": stage_homogenize,
    "cell": stage_cell,
    "solve-effective": stage_solve_effective,
    "solve-multiscale": stage_solve_multiscale,
    "converge": stage_converge,
    "simulate": stage_simulate,
}


def run_stage(ctx: Context, name: str, **kwargs):
    log.info("stage %s", name)
    t0 = time.perf_counter()
    try:
        outputs, info = STAGE_FUNCS[name](ctx, **kwargs)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"stage '{name}' failed: {exc}") from exc
    inputs = [OUTPUTS[d] for d in DEPENDS[name]]
    ctx.manifest.record(name, inputs, [Path(p).name for p in outputs], round(time.perf_counter() - t0, 3),
                        _jsonable(info))
    ctx.manifest.save(ctx.out_dir)
    return outputs


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def run_pipeline(ctx: Context, stages=STAGES) -> RunManifest:
    """Run the requested stages in dependency order."""
    wanted = set(stages)
    unknown = wanted - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    for name in STAGES:
        if name in wanted:
            run_stage(ctx, name)
    return ctx.manifest


# --------------------------------------------------------------------------- report

REPORT_FILES = {
    "density": "report_density_heatmap.dat",
    "homogenize": "report_kappa.dat",
    "solve-effective": "report_value_effective.dat",
    "converge": "report_err_vs_eps.dat",
    "converge-slices": "report_multiscale_slice.dat",
    "cell": "report_cell_growth.dat",
}


def _write_dat(path: Path, columns, data):
    with open(path, "w") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in data:
            fh.write(" ".join(_fmt(float(v)) for v in row) + "\n")


def emit_report(out_dir: Path) -> tuple:
    """Summary text plus plot-ready data files for every completed stage."""
    manifest_path = out_dir / MANIFEST
    if not manifest_path.exists():
        return "", []
    manifest = RunManifest.load(out_dir)
    done = {s["name"]: s for s in manifest.stages}
    lines, files = [], []

    def emit(key, columns, data):
        path = out_dir / REPORT_FILES[key]
        _write_dat(path, columns, data)
        files.append(path.name)

    if "density" in done and (out_dir / OUTPUTS["density"]).exists():
        cols, data, _ = read_numeric(out_dir / OUTPUTS["density"])
        xs = np.unique(data[:, 0])
        mid = xs[np.argmin(np.abs(xs - 0.5))]
        sel = data[data[:, 0] == mid]
        emit("density", ("y1", "y2", "rho"), sel[:, 1:])
        lines.append(f"density: {xs.size} slices, heatmap at x={mid:.4g}")
    if "homogenize" in done and (out_dir / OUTPUTS["homogenize"]).exists():
        _, data, _ = read_numeric(out_dir / OUTPUTS["homogenize"])
        emit("homogenize", ("x", "kappa"), data[:, [0, 4]])
        lines.append(f"homogenize: max|kappa| = {np.max(np.abs(data[:, 4])):.4e}")
    if "cell" in done and (out_dir / OUTPUTS["cell"]).exists():
        _, data, _ = read_numeric(out_dir / OUTPUTS["cell"])
        emit("cell", ("t", "mean_w_over_t", "spread"), data)
        info = done["cell"].get("info", {})
        lines.append(f"cell: H_cell={info.get('H_cell', float('nan')):.6g} "
                     f"H_quad={info.get('H_quad', float('nan')):.6g} spread={info.get('spread', float('nan')):.3e}")
    if "solve-effective" in done and (out_dir / OUTPUTS["solve-effective"]).exists():
        _, data, _ = read_numeric(out_dir / OUTPUTS["solve-effective"])
        emit("solve-effective", ("x", "v_bar", "policy"), data)
        info = done["solve-effective"].get("info", {})
        lines.append(f"solve-effective: residual={info.get('residual', float('nan')):.3e} "
                     f"neumann={info.get('neumann_residual', float('nan')):.3e}")
    if "solve-multiscale" in done:
        info = done["solve-multiscale"].get("info", {})
        lines.append(f"solve-multiscale: eps={info.get('epsilon')} residual={info.get('residual', float('nan')):.3e} "
                     f"neumann={info.get('neumann_residual', float('nan')):.3e}")
    if "converge" in done and (out_dir / OUTPUTS["converge"]).exists():
        cols, data, _ = read_numeric(out_dir / OUTPUTS["converge"])
        emit("converge", ("log10_eps", "log10_err_inf", "log10_err_sup"),
             np.log10(np.maximum(data[:, :3], 1e-300)))
        for r in data:
            lines.append(f"converge: eps={r[0]:g} err_inf={r[1]:.4e} err_sup={r[2]:.4e}")
        if (out_dir / SLICES_FILE).exists():
            _, sl, _ = read_numeric(out_dir / SLICES_FILE)
            emit("converge-slices", ("epsilon", "x", "v_min_y", "v_max_y", "v_bar"), sl)
    if "simulate" in done and (out_dir / OUTPUTS["simulate"]).exists():
        _, rows, _ = read_csv(out_dir / OUTPUTS["simulate"])
        for r in rows:
            mean, se, pde = float(r[4]), float(r[5]), float(r[6])
            lines.append(f"simulate: {r[0]} x0={float(r[1]):g} mc={mean:.5g}±{se:.2g} pde={pde:.5g}")
    if files:
        lines.append("data files: " + ", ".join(files))
    text = "\n".join(lines)
    if lines:
        (out_dir / "report.txt").write_text(text + "\n")
    return text, files


# --------------------------------------------------------------------------- argument parsing

def _common(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--scenario", default=d, help="scenario file")
    parser.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else "out", help="output directory")
    parser.add_argument("--seed", type=int, default=d, help="override the scenario seed")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1)
    parser.add_argument("--check", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="evaluate acceptance checks for the produced outputs (exit 4 on failure)")
    parser.add_argument("--auto-deps", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="run missing upstream stages automatically")
    parser.add_argument("--timing", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="add wall-clock columns to the convergence CSV (breaks byte-reproducibility)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiscale-hjb", description=__doc__)
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p, suppress=True)
        return p

    p = add("density", "invariant density at one slow state, or the sweep over the slow grid")
    p.add_argument("--x-bar", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--out")

    p = add("homogenize", "effective coefficient tables")
    p.add_argument("--out")

    p = add("cell", "cell problem growth rate")
    p.add_argument("--x-bar", type=float, default=0.5)
    p.add_argument("--g", type=float, default=1.0)
    p.add_argument("--H", type=float, default=0.0)
    p.add_argument("--T", type=float)
    p.add_argument("--out")

    p = add("solve-effective", "effective HJB")
    p.add_argument("--out")

    p = add("solve-multiscale", "multiscale HJB at one epsilon")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--out")

    p = add("converge", "convergence study over the epsilon list")
    p.add_argument("--out")

    p = add("simulate", "Monte Carlo cost under the PDE policy")
    p.add_argument("--which", choices=("multiscale", "effective", "both"), default="both")
    p.add_argument("--x0", type=_floats, default=(-0.5, 0.0, 0.5))
    p.add_argument("--y0", type=_floats, default=(0.25, 0.75))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--paths-out", help="also write per-path costs to this CSV")
    p.add_argument("--out")

    p = add("pipeline", "run several stages in dependency order")
    p.add_argument("--stages", default=",".join(STAGES), help="comma-separated subset of stages")

    add("report", "summarize the manifest in --out-dir and write plot data files")
    return parser


def _load_cfg(args) -> ScenarioConfig:
    if not args.scenario:
        raise ConfigError("--scenario is required")
    try:
        text = Path(args.scenario).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}") from exc
    cfg = load_scenario(text)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.out_dir)
    try:
        if args.command == "report":
            text, _ = emit_report(out_dir)
            if text:
                print(text)
            return EXIT_OK
        cfg = _load_cfg(args)
        ctx = Context(cfg, out_dir, args.threads, args.auto_deps, args.timing)
        cmd = args.command
        if cmd == "pipeline":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            run_pipeline(ctx, stages)
        elif cmd == "density":
            run_stage(ctx, cmd, x_bar=args.x_bar, n=args.n, out=args.out)
        elif cmd == "cell":
            run_stage(ctx, cmd, x_bar=args.x_bar, g=args.g, H=args.H, T=args.T, out=args.out)
        elif cmd == "solve-multiscale":
            run_stage(ctx, cmd, epsilon=args.epsilon, out=args.out)
        elif cmd == "simulate":
            run_stage(ctx, cmd, which=args.which, x0_list=args.x0, y0=args.y0, epsilon=args.epsilon,
                      paths=args.paths, dt=args.dt, paths_out=args.paths_out, out=args.out)
        else:
            run_stage(ctx, cmd, out=args.out)
    except (ConfigError, DependencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for name, passed, detail in ctx.checks:
        print(f"[{'PASS' if passed else 'FAIL'}] {name} {detail}".rstrip())
    if args.check and not all(p for _, p, _ in ctx.checks):
        return EXIT_ACCEPT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
