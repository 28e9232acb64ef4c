"""Experiment suites behind the command line, and the report they produce."""
from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from ..cell import CellProblem, richardson, tabulate
from ..expr import parse_expression
from ..extension import fit_loglog_slope, flatness, measure_ratio
from ..fem import epsilon_mesh
from ..fine import (constant_source, expression_source, h1eps_norm, solve_fine, spike_source,
                    truncation_diagnostics)
from ..geometry import build_tiling
from ..homog import homogenize, reference_mesh, two_scale_residuals
from ..unfolding import (boundary_l2_norm, integrate_unfolded, l2_norm, physical_integral, physical_interface_l2,
                         product_identity_check, restrict_part, unfold, unfold_boundary, unfold_gradient_check,
                         unfolding_error)
from .config import ConfigError, from_dict
from .plots import write_plot

COMMANDS = ("unfold-check", "extbench", "cell", "fine", "homog", "sweep")


@dataclass(eq=False)
class Table:
    columns: list
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]


@dataclass(eq=False)
class RunReport:
    command: str
    tables: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    plots: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.checks.values())

    def check(self, name, ok):
        self.checks[name] = bool(ok)

    def summary(self):
        return {
            "command": self.command,
            "passed": self.passed,
            "checks": dict(sorted(self.checks.items())),
            "info": self.info,
            "provenance": self.provenance,
        }

    def write(self, out_dir, formats=("csv", "json", "svg")):
        os.makedirs(out_dir, exist_ok=True)
        written = []
        if "csv" in formats:
            for name, table in self.tables.items():
                path = os.path.join(out_dir, f"{name}.csv")
                write_csv(path, table)
                written.append(path)
        if "json" in formats:
            path = os.path.join(out_dir, "summary.json")
            with open(path, "w", newline="\n") as fh:
                json.dump(_jsonable(self.summary()), fh, indent=2, sort_keys=True)
                fh.write("\n")
            written.append(path)
        if "svg" in formats:
            for fname, series, title, xlabel, ylabel in self.plots:
                path = os.path.join(out_dir, fname)
                write_plot(path, series, title, xlabel, ylabel)
                written.append(path)
        return written


def _cell_text(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell_text(row[c]) for c in table.columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _monotone_halving(values, ratio=0.5):
    v = list(values)
    mono = all(b < a for a, b in zip(v, v[1:]))
    return mono, v[-1] / v[0] <= ratio


def _spans_two_octaves(eps):
    """The halving check is only meaningful when eps shrinks by at least 4."""
    return eps[0] / eps[-1] >= 4.0 - 1e-12


# ---------------------------------------------------------------------------
# shared setup


def _emeshes(config):
    """Tilings and eps-meshes for every eps; geometry problems become config errors."""
    cell, domain = config.cell(), config.domain()
    out = []
    for eps in config.geometry.eps:
        try:
            tiling = build_tiling(cell, domain, eps)
            if tiling.status == "empty":
                raise ValueError(tiling.warnings[0])
            out.append(epsilon_mesh(tiling, config.geometry.m, config.geometry.boundary_inclusions))
        except ValueError as exc:
            raise ConfigError(f"geometry at eps={eps}: {exc}") from exc
    return out


def _coercive_model(config):
    """The coefficient model, after checking its declared coercivity on the t-range."""
    coeff = config.coefficient()
    lo, hi = config.solver.t_range
    try:
        coeff.check_coercive(np.linspace(lo, hi, 9))
    except ValueError as exc:
        raise ConfigError(f"model.alpha: {exc}") from exc
    return coeff


def _source(config, tiling):
    if config.model.data == "L1":
        return spike_source(tiling, config.model.spike_center, config.model.spike_mass)
    expr = parse_expression(config.model.f, ("x1", "x2"))
    if not expr.variables:
        return constant_source(float(expr()))
    return expression_source(expr)


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


# ---------------------------------------------------------------------------
# unfold-check


def _unfold_rows(job):
    cfg_dict, index, seed = job
    config = from_dict(cfg_dict)
    emesh = _emeshes(config)[index]
    tiling = emesh.tiling
    rng = np.random.default_rng([seed, index])
    full = emesh.full
    phi = rng.standard_normal(full.n_nodes)
    psi = rng.standard_normal(full.n_nodes)
    smooth = full.interpolate(lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]))
    vol_y = math.prod(tiling.cell.periods)
    row = {"eps": tiling.eps, "exact": tiling.is_exact()}
    row["product"] = product_identity_check(phi, psi, emesh, "Y", mesh=full)
    worst = 0.0
    parts = ("Y", "Y1", "Y2") if tiling.cell.has_inclusion else ("Y",)
    for part in parts:
        a = integrate_unfolded(unfold(smooth, emesh, part, mesh=full))
        b = physical_integral(smooth, emesh, part, mesh=full)
        worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    row["integral"] = worst
    row["gradient"] = unfold_gradient_check(phi, emesh, "Y", mesh=full)
    bound_ok = True
    for part in parts:
        if part == "Y":
            mesh, vals = full, phi
        else:
            mesh = emesh.matrix if part == "Y1" else emesh.inclusions
            vals = mesh.restrict(phi)
        lhs = l2_norm(unfold(vals, emesh, part, mesh=mesh))
        v = mesh.values_at_qp(vals)
        rhs = math.sqrt(vol_y * float((v * v).sum() * mesh.qp_weight))
        bound_ok &= lhs <= rhs * (1 + 1e-12)
    row["norm_bound"] = bound_ok
    if tiling.cell.has_inclusion and emesh.inclusions is not None:
        trace = emesh.matrix.interpolate(lambda x: x[..., 0])
        lhs = boundary_l2_norm(unfold_boundary(trace, emesh, mesh=emesh.matrix)) ** 2
        rhs = tiling.eps * vol_y * physical_interface_l2(trace, emesh, mesh=emesh.matrix) ** 2
        row["boundary"] = abs(lhs - rhs) / rhs
        whole = unfold(phi, emesh, "Y", mesh=full)
        re = max(float(np.abs(restrict_part(whole, p).values - unfold(phi, emesh, p, mesh=full).values).max())
                 for p in ("Y1", "Y2"))
        row["reassembly"] = re
    else:
        row["boundary"] = 0.0
        row["reassembly"] = 0.0
    smooth_fn = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    row["ladder_error"] = unfolding_error(smooth_fn, emesh, "Y")
    return row


def run_unfold_check(config, workers=1, seed=0):
    report = RunReport("unfold-check")
    _emeshes(config)
    jobs = [(config.to_dict(), i, seed) for i in range(len(config.geometry.eps))]
    cols = ["eps", "exact", "product", "integral", "gradient", "boundary", "norm_bound", "reassembly", "ladder_error"]
    table = Table(cols, _map(_unfold_rows, jobs, workers))
    report.tables["unfold_identities"] = table
    for r in table.rows:
        tag = f"eps={r['eps']:g}"
        report.check(f"product identity {tag}", r["product"] <= 1e-13)
        report.check(f"gradient identity {tag}", r["gradient"] <= 1e-13)
        report.check(f"norm bound {tag}", r["norm_bound"])
        report.check(f"reassembly {tag}", r["reassembly"] == 0.0)
        if r["exact"]:
            report.check(f"integration identity {tag}", r["integral"] <= 1e-12)
            report.check(f"boundary identity {tag}", r["boundary"] <= 1e-12)
    errs = table.column("ladder_error")
    if len(errs) > 1:
        mono, ratio = _monotone_halving(errs)
        report.check("unfolding ladder monotone", mono)
        if _spans_two_octaves(table.column("eps")):
            report.check("unfolding ladder ratio <= 0.5", ratio)
    report.plots.append(("unfold_ladder.svg", {"||T(phi) - phi||": (table.column("eps"), errs)},
                         "unfolding error", "eps", "L2 error"))
    report.info["ladder_ratio"] = errs[-1] / errs[0] if errs else math.nan
    return report


# ---------------------------------------------------------------------------
# extbench


def _ext_rows(job):
    cfg_dict, variant, family, seed = job
    config = from_dict(cfg_dict)
    emeshes = _emeshes(config)
    return measure_ratio(variant, emeshes, family, seed=seed, eta=config.extbench.eta)


def run_extbench(config, workers=1, seed=None):
    report = RunReport("extbench")
    if not config.cell().has_inclusion:
        raise ConfigError("geometry.inclusion: extension benchmarks need an inclusion")
    _emeshes(config)
    seed = config.extbench.seed if seed is None else seed
    report.info["seed"] = seed
    jobs = [(config.to_dict(), v, fam, seed) for v in ("P2", "P2bar") for fam in config.extbench.families]
    table = Table(["variant", "eps", "family", "ratio", "status"])
    series = {}
    for rows in _map(_ext_rows, jobs, workers):
        table.rows.extend(rows)
        if rows:
            ok = [r for r in rows if r["status"] == "ok"]
            if ok:
                series[f"{rows[0]['variant']} {rows[0]['family']}"] = ([r["eps"] for r in ok], [r["ratio"] for r in ok])
    report.tables["extension_ratios"] = table
    for variant, family in (("P2", "zero-mean"), ("P2bar", "constant")):
        rows = [r for r in table.rows if r["variant"] == variant and r["family"] == family and r["status"] == "ok"]
        if len(rows) < 2:
            continue
        if variant == "P2":
            flat = flatness([r["ratio"] for r in rows])
            report.info["p2_flatness"] = flat
            report.check("P2 zero-mean ratio flat within 15%", flat <= 0.15)
        else:
            slope = fit_loglog_slope([r["eps"] for r in rows], [r["ratio"] for r in rows])
            report.info["p2bar_slope"] = slope
            report.check("P2bar constant-input slope in [-1.2, -0.8]", -1.2 <= slope <= -0.8)
    report.plots.append(("extension_ratios.svg", series, "extension norm ratios", "eps", "ratio"))
    return report


# ---------------------------------------------------------------------------
# cell


def _cell_level(job):
    cfg_dict, m, t = job
    config = from_dict(cfg_dict)
    prob = CellProblem(config.cell(), m, config.coefficient())
    sols = prob.solve(t)
    flux = prob.tensor(t, sols)
    energy = prob.energy_tensor(t, sols)
    return flux, energy, prob.voigt_bound(t)


def run_cell(config, workers=1, seed=0):
    report = RunReport("cell")
    cell, coeff, s = config.cell(), _coercive_model(config), config.solver
    table = tabulate(coeff, cell, config.geometry.m, tuple(s.t_range), s.table_samples, workers=workers,
                     keep_chi=False)
    t_tab = Table(["t", "a11", "a12", "a21", "a22", "min_eig"])
    for t, a, e in zip(table.t, table.tensors, table.min_eigenvalues()):
        t_tab.add(t=t, a11=a[0, 0], a12=a[0, 1], a21=a[1, 0], a22=a[1, 1], min_eig=e)
    report.tables["tensor_table"] = t_tab
    report.info.update(alpha0=table.alpha0, lipschitz=table.lipschitz())
    report.check("coercivity certificate alpha0 > 0", table.alpha0 > 0)
    if coeff.is_symmetric_form:
        report.check("tensor symmetric to 1e-10", table.symmetry_defect() <= 1e-10)

    t0 = 0.0 if s.t_range[0] <= 0.0 <= s.t_range[1] else s.t_range[0]
    levels = _map(_cell_level, [(config.to_dict(), m, t0) for m in s.cell_m], workers)
    r_tab = Table(["m", "a11", "a12", "a21", "a22", "energy_defect", "voigt_ok"])
    lam_tests = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]) / np.array([[1.0], [1.0], [math.sqrt(2.0)]])
    for m, (flux, energy, voigt) in zip(s.cell_m, levels):
        defect = float(np.abs(flux - energy).max())
        voigt_ok = all(lam @ flux @ lam <= lam @ voigt @ lam + 1e-12 for lam in lam_tests)
        r_tab.add(m=m, a11=flux[0, 0], a12=flux[0, 1], a21=flux[1, 0], a22=flux[1, 1], energy_defect=defect,
                  voigt_ok=voigt_ok)
        if coeff.is_symmetric_form:
            report.check(f"energy/flux consistency m={m}", defect <= 1e-10)
        report.check(f"Voigt bound m={m}", voigt_ok)
    report.tables["cell_refinement"] = r_tab
    if len(levels) >= 3:
        diag = [lv[0][0, 0] for lv in levels]
        limit, order = richardson(diag)
        spread = max(abs(d - limit) / abs(limit) for d in diag)
        report.info.update(a_star=float(limit), richardson_order=float(order), richardson_spread=spread)
        report.check("Richardson a* stable to 1%", spread <= 0.01)
    base = CellProblem(cell, config.geometry.m, coeff).tensor(t0)
    scaled = CellProblem(cell, config.geometry.m, coeff.scaled(2.0)).tensor(t0)
    report.check("scalar scaling equivariance", float(np.abs(scaled - 2.0 * base).max()) <= 1e-12 * max(1.0, np.abs(base).max()))
    report.plots.append(("tensor_table.svg", {"A0_11": (list(table.t), list(table.tensors[:, 0, 0])),
                                              "A0_22": (list(table.t), list(table.tensors[:, 1, 1]))},
                         "homogenized tensor", "t", "entry"))
    return report


# ---------------------------------------------------------------------------
# fine


def _fine_job(job):
    cfg_dict, index = job
    config = from_dict(cfg_dict)
    emesh = _emeshes(config)[index]
    s = config.solver
    f = _source(config, emesh.tiling)
    sol = solve_fine(emesh, config.coefficient(), f, config.model.gamma, s.picard_tol, s.maxit, s.linear_tol,
                     damping=s.damping)
    e = sol.energies()
    row = {"eps": sol.eps, "iterations": sol.iterations, "damped": sol.damped,
           "final_update": sol.trace[-1], "volume1": e["volume1"], "volume2": e["volume2"],
           "interface": e["interface"], "work": e["work"], "balance": sol.balance_residual(),
           "h1eps_norm": h1eps_norm(sol), "jump_l2": sol.jump_l2(),
           "u1_max": float(np.abs(sol.u1).max()), "u2_max": float(np.abs(sol.u2).max()) if len(sol.u2) else 0.0}
    trunc = truncation_diagnostics(sol, s.k_list)
    for r in trunc:
        r["eps"] = sol.eps
    return row, trunc


def run_fine(config, workers=1, seed=0):
    report = RunReport("fine")
    _emeshes(config)
    coeff = _coercive_model(config)
    results = _map(_fine_job, [(config.to_dict(), i) for i in range(len(config.geometry.eps))], workers)
    cols = ["eps", "iterations", "damped", "final_update", "volume1", "volume2", "interface", "work", "balance",
            "h1eps_norm", "jump_l2", "u1_max", "u2_max"]
    table = Table(cols, [r for r, _ in results])
    trunc = Table(["eps", "k", "energy", "a_energy", "dissipation", "balance", "tail_energy", "scaled_energy"],
                  [t for _, rows in results for t in rows])
    report.tables["fine_summary"] = table
    report.tables["truncation"] = trunc
    for r in table.rows:
        tag = f"eps={r['eps']:g}"
        report.check(f"Picard converged {tag}", r["final_update"] <= config.solver.picard_tol)
        if not coeff.depends_on_t:
            report.check(f"single iteration for t-independent model {tag}", r["iterations"] == 1)
            report.check(f"energy balance {tag}", r["balance"] <= 1e-8)
    if config.model.data == "L1":
        for r in table.rows:
            rows = [t for t in trunc.rows if t["eps"] == r["eps"]]
            vals = [t["scaled_energy"] for t in rows]
            ok = all(b <= a * (1 + 1e-12) for a, b in zip(vals, vals[1:]))
            report.check(f"scaled truncated energy nonincreasing eps={r['eps']:g}", ok)
            c = max(t["energy"] / t["k"] for t in rows)
            report.info[f"energy_over_k_eps={r['eps']:g}"] = c
    report.info["iterations"] = table.column("iterations")
    series = {f"eps={r['eps']:g}": ([t["k"] for t in trunc.rows if t["eps"] == r["eps"]],
                                   [t["energy"] for t in trunc.rows if t["eps"] == r["eps"]]) for r in table.rows}
    report.plots.append(("truncation.svg", series, "energy of T_k(u)", "k", "energy"))
    return report


# ---------------------------------------------------------------------------
# homog and sweep


def _reference_n(config):
    if config.solver.reference_n:
        return config.solver.reference_n
    eps = min(config.geometry.eps)
    lo, hi = config.geometry.domain
    n = (hi[0] - lo[0]) / (eps * config.geometry.periods[0] / config.geometry.m)
    return int(round(n))


def _homogenized(config, workers=1, tiling=None):
    s = config.solver
    if tiling is None:
        tiling = build_tiling(config.cell(), config.domain(), min(config.geometry.eps))
    f = _source(config, tiling)
    mesh = reference_mesh(config.domain(), _reference_n(config))
    return homogenize(config.coefficient(), config.cell(), config.geometry.m, f, mesh, s.table_samples,
                      s.picard_tol, s.maxit, workers, damping=s.damping)


def run_homog(config, workers=1, seed=0):
    report = RunReport("homog")
    _emeshes(config)
    coeff = _coercive_model(config)
    sol = _homogenized(config, workers)
    tab = Table(["t", "a11", "a12", "a21", "a22", "min_eig"])
    for t, a, e in zip(sol.table.t, sol.table.tensors, sol.table.min_eigenvalues()):
        tab.add(t=t, a11=a[0, 0], a12=a[0, 1], a21=a[1, 0], a22=a[1, 1], min_eig=e)
    report.tables["homog_tensor_table"] = tab
    lo, hi = config.geometry.domain
    g = np.linspace(0.0, 1.0, 33)
    pts = np.stack(np.meshgrid(lo[0] + g * (hi[0] - lo[0]), lo[1] + g * (hi[1] - lo[1]), indexing="ij"), -1)
    pts = pts.reshape(-1, 2)
    u1 = sol.value(pts)
    u2 = sol.u2_value(pts) if config.cell().has_inclusion else u1
    samples = Table(["x1", "x2", "u1", "u2"])
    for (x1, x2), a, b in zip(pts, u1, u2):
        samples.add(x1=x1, x2=x2, u1=a, u2=b)
    report.tables["homog_solution"] = samples
    center = np.array([[(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2]])
    report.info.update(iterations=sol.iterations, center_value=float(sol.value(center)[0]),
                       offset=sol.offset, alpha0=sol.table.alpha0, clamp_warnings=sol.warnings)
    report.check("homogenized Picard converged", sol.trace[-1] <= config.solver.picard_tol)
    report.check("coercivity certificate alpha0 > 0", sol.table.alpha0 > 0)
    if not coeff.depends_on_t:
        report.check("single iteration for t-independent model", sol.iterations == 1)
    return report


def _sweep_job(job):
    cfg_dict, index, homog = job
    config = from_dict(cfg_dict)
    emesh = _emeshes(config)[index]
    s = config.solver
    f = _source(config, emesh.tiling)
    fine = solve_fine(emesh, config.coefficient(), f, config.model.gamma, s.picard_tol, s.maxit, s.linear_tol,
                      damping=s.damping)
    row = two_scale_residuals(fine, homog)
    row["iterations"] = fine.iterations
    return row


def run_sweep(config, workers=1, seed=0):
    report = RunReport("sweep")
    if config.model.data != "L2":
        raise ConfigError("model.data: the sweep compares with the inclusion limit, which needs L2 (continuous) data")
    if not config.cell().has_inclusion:
        raise ConfigError("geometry.inclusion: the sweep needs a two-component cell")
    _emeshes(config)
    _coercive_model(config)
    homog = _homogenized(config, workers)
    rows = _map(_sweep_job, [(config.to_dict(), i, homog) for i in range(len(config.geometry.eps))], workers)
    cols = ["eps", "e1", "e2", "r_jump", "osc2", "mean2", "grad_plain", "grad_corrected", "iterations"]
    table = Table(cols, rows)
    report.tables["ladder"] = table
    if len(rows) > 1:
        for name in ("e1", "r_jump"):
            mono, ratio = _monotone_halving(table.column(name))
            report.check(f"{name} monotone decreasing", mono)
            if _spans_two_octaves(table.column("eps")):
                report.check(f"{name} final/initial <= 0.5", ratio)
    last = rows[-1]
    report.check("corrector improves gradient at finest eps", last["grad_corrected"] < last["grad_plain"])
    report.info.update(homog_iterations=homog.iterations, offset=homog.offset)
    eps = table.column("eps")
    report.plots.append(("ladder.svg", {k: (eps, table.column(k)) for k in ("e1", "e2", "r_jump", "grad_corrected")},
                         "two-scale discrepancies", "eps", "L2 norm"))
    return report


SUITES = {
    "unfold-check": run_unfold_check,
    "extbench": run_extbench,
    "cell": run_cell,
    "fine": run_fine,
    "homog": run_homog,
    "sweep": run_sweep,
}


def run(command, config, workers=1, seed=None):
    """Execute one suite and attach provenance and timing."""
    if command not in SUITES:
        raise ConfigError(f"unknown command {command!r}")
    start = time.perf_counter()
    if command == "extbench":
        report = SUITES[command](config, workers, seed)
    else:
        report = SUITES[command](config, workers, 0 if seed is None else seed)
    report.info["seconds"] = round(time.perf_counter() - start, 3)
    report.provenance = {"config_sha256": config.digest(), "version": __version__, "workers": workers,
                         "seed": seed}
    return report
