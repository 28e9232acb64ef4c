"""One test per acceptance criterion; each records a PASS/FAIL line shown at the end of the run."""
import pathlib
import time

import numpy as np
import pytest

from unfoldhom.cell import CellProblem, homogenized_tensor, richardson, tabulate
from unfoldhom.extension import CellExtension, extend_periodic, fit_loglog_slope, flatness, measure_ratio
from unfoldhom.fem import CoefficientModel
from unfoldhom.fine import FineProblem, constant_source, solve_fine, spike_source, truncation_diagnostics
from unfoldhom.geometry import Box, ReferenceCell
from unfoldhom.harness.config import load_config
from unfoldhom.harness.runner import _emeshes, _source, run
from unfoldhom.homog import homogenize, reference_mesh, two_scale_residuals
from unfoldhom.unfolding import (boundary_l2_norm, integrate_unfolded, restrict_part, unfold, unfold_boundary,
                                 unfolding_error)

from conftest import BASELINES, ROOT, emesh_for, quasilinear_model, record_criterion

SQUARE = ReferenceCell()
EMPTY = ReferenceCell(inclusion=None)
LADDER = (0.25, 0.125, 0.0625, 0.03125)
ONE = constant_source(1.0)
SHIPPED = sorted((ROOT / "configs").glob("*.toml"))


def monotone_halving(values):
    return all(b < a for a, b in zip(values, values[1:])) and values[-1] / values[0] <= 0.5


# ---------------------------------------------------------------------------
# 1. unfolding identities


def box_integral(lo, hi):
    (a, c), (b, d) = lo, hi
    return ((b - a) + 0.5 * (b * b - a * a)) * (2 * (d - c) - 0.5 * (d * d - c * c))


def identity_errors(eps, rng):
    em = emesh_for(eps)
    full = em.full
    phi, psi = rng.standard_normal((2, full.n_nodes))
    out = {}
    # product rule, relative to the size of the unfolded product
    tp = unfold(phi * psi, em, "Y", mesh=full).values
    prod = unfold(phi, em, "Y", mesh=full).values * unfold(psi, em, "Y", mesh=full).values
    out["product"] = float(np.abs(tp - prod).max() / np.abs(tp).max())
    # integration: against closed-form integrals of (1 + x1)(2 - x2) over the whole box and the inclusions
    vals = full.interpolate(lambda x: (1 + x[..., 0]) * (2 - x[..., 1]))
    whole = box_integral((0, 0), (1, 1))
    inc = sum(box_integral(((k[0] + 0.25) * eps, (k[1] + 0.25) * eps), ((k[0] + 0.75) * eps, (k[1] + 0.75) * eps))
              for k in em.tiling.cells)
    err = 0.0
    for part, ref in (("Y", whole), ("Y1", whole - inc), ("Y2", inc)):
        err = max(err, abs(integrate_unfolded(unfold(vals, em, part, mesh=full)) - ref) / abs(ref))
    out["integration"] = err
    # gradient: grad_y T(phi) against eps T(grad phi) gathered element by element
    field = unfold(phi, em, "Y", mesh=full)
    left = field.gradient_at_qp()
    g = full.gradients_at_qp(phi)
    micro = field.micro
    right = np.empty_like(left)
    for c, k in enumerate(em.tiling.cells):
        a0, b0 = em.cell_element_ids(k)
        right[c] = eps * g[full.element_index[a0 + micro.element_ij[:, 0], b0 + micro.element_ij[:, 1]]]
    out["gradient"] = float(np.abs(left - right).max() / np.abs(right).max())
    # boundary: ||T_b(x1)||^2 on Omega x Gamma against eps * closed form of int_{Gamma_eps} x1^2
    trace = em.matrix.interpolate(lambda x: x[..., 0])
    total = 0.0
    for k in em.tiling.cells:
        a, b = (k[0] + 0.25) * eps, (k[0] + 0.75) * eps
        total += 2 * (b ** 3 - a ** 3) / 3 + 0.5 * eps * (a * a + b * b)
    lhs = boundary_l2_norm(unfold_boundary(trace, em, mesh=em.matrix)) ** 2
    out["boundary"] = abs(lhs - eps * total) / (eps * total)
    return out


def test_criterion_1_unfolding_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    limits = {"product": 1e-13, "integration": 1e-12, "gradient": 1e-13, "boundary": 1e-12}
    worst = {k: 0.0 for k in limits}
    for eps in (0.25, 0.125):
        for key, val in identity_errors(eps, rng).items():
            worst[key] = max(worst[key], val)
    ok = all(worst[k] <= limits[k] for k in limits)
    detail = ", ".join(f"{k} {worst[k]:.1e}<= {limits[k]:.0e}" for k in limits)
    assert record_criterion(1, "unfolding identities", ok, detail, time.perf_counter() - start, 10)


# ---------------------------------------------------------------------------
# 2. unfolding convergence ladder


def test_criterion_2_unfolding_ladder():
    start = time.perf_counter()
    phi = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    errs = [unfolding_error(phi, emesh_for(e)) for e in LADDER]
    ok = monotone_halving(errs)
    detail = "errors " + " ".join(f"{e:.3e}" for e in errs) + f", ratio {errs[-1] / errs[0]:.3f} <= 0.5"
    assert record_criterion(2, "unfolding convergence ladder", ok, detail, time.perf_counter() - start, 30)


# ---------------------------------------------------------------------------
# 3. extension operators


def test_criterion_3_extension_operators():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    ops = CellExtension(SQUARE, 8)
    u = rng.standard_normal((20, ops.Y2.n_nodes))
    ext = ops.extend_p2(u)
    outer = ops.Y.node_index[ops.outer_ids]
    cell_ok = np.array_equal(ext[:, ops._pos_y2], u) and not ext[:, outer].any()
    w = rng.standard_normal((20, ops.Y1.n_nodes))
    cell_ok &= np.array_equal(ops.extend_p1(w)[:, ops._pos_y1], w)
    ident_ok = True
    for eps in (0.25, 0.125, 0.0625):
        em = emesh_for(eps)
        for variant, part, mesh in (("P2", "Y2", em.inclusions), ("P1", "Y1", em.matrix)):
            v = rng.standard_normal(mesh.n_nodes)
            lifted = extend_periodic(v, em, variant, ops=ops)
            ident_ok &= np.array_equal(restrict_part(unfold(lifted.field, em, "Y"), part).values,
                                       unfold(v, em, part, mesh=mesh).values)
    ems = [emesh_for(e) for e in LADDER]
    p2 = measure_ratio("P2", ems, "zero-mean", seed=0)
    flat = flatness([r["ratio"] for r in p2])
    legacy = measure_ratio("P2bar", ems, "constant", seed=0, eta=0.125)
    slope = fit_loglog_slope([r["eps"] for r in legacy], [r["ratio"] for r in legacy])
    ok = bool(cell_ok and ident_ok and flat <= 0.15 and -1.2 <= slope <= -0.8)
    detail = (f"(a) exact {cell_ok}, (b) unfolded identity exact {ident_ok}, (c) P2 flatness {flat:.3f} <= 0.15, "
              f"(d) P2bar slope {slope:.3f} in [-1.2, -0.8]")
    assert record_criterion(3, "extension operators", ok, detail, time.perf_counter() - start, 120)


# ---------------------------------------------------------------------------
# 4. cell problem and homogenized tensor


def test_criterion_4_cell_tensor():
    start = time.perf_counter()
    coeff = CoefficientModel()
    empty = homogenized_tensor(0.0, EMPTY, 16, CoefficientModel("3", "0.5", "0.5", "2"))
    empty_err = float(np.abs(empty - [[3.0, 0.5], [0.5, 2.0]]).max())
    diag, off, defect, voigt_ok = [], 0.0, 0.0, True
    for m in (16, 32, 64):
        prob = CellProblem(SQUARE, m, coeff)
        sols = prob.solve(0.0)
        a0 = prob.tensor(0.0, sols)
        diag.append(a0[0, 0])
        off = max(off, abs(a0[0, 1]), abs(a0[1, 0]))
        defect = max(defect, float(np.abs(a0 - prob.energy_tensor(0.0, sols)).max()))
        voigt_ok &= bool(np.linalg.eigvalsh(prob.voigt_bound(0.0) - a0).min() >= -1e-12)
    limit, order = richardson(diag)
    spread = max(abs(d - limit) / limit for d in diag)
    table = tabulate(quasilinear_model(), SQUARE, 16, (-5.0, 5.0), 11)
    alpha0 = table.alpha0
    aniso = CoefficientModel("2 + sin(2*pi*y1)", "0.5", "0.5", "1.5 + 0.5*cos(2*pi*y2)", alpha=0.5)
    base = homogenized_tensor(0.0, SQUARE, 16, aniso)
    scale_err = float(np.abs(homogenized_tensor(0.0, SQUARE, 16, aniso.scaled(2.5)) - 2.5 * base).max())
    scale_err /= float(np.abs(base).max())
    ok = (empty_err <= 1e-10 and off <= 1e-8 and defect <= 1e-10 and voigt_ok and spread <= 0.01
          and alpha0 > 0 and scale_err <= 1e-12)
    detail = (f"empty {empty_err:.1e}, off-diag {off:.1e}, energy/flux {defect:.1e}, Voigt {voigt_ok}, "
              f"a* {limit:.5f} (order {order:.2f}, spread {spread:.4f} <= 0.01), alpha0 {alpha0:.4f} > 0, "
              f"scaling {scale_err:.1e}")
    assert record_criterion(4, "cell and homogenized tensor", ok, detail, time.perf_counter() - start, 120)


# ---------------------------------------------------------------------------
# 5. homogenization ladder


def ladder(coeff):
    mesh = reference_mesh(Box.unit(), 256)
    homog = homogenize(coeff, SQUARE, 8, ONE, mesh)
    return [two_scale_residuals(solve_fine(emesh_for(e), coeff, ONE), homog) for e in LADDER]


@pytest.mark.slow
def test_criterion_5_homogenization_ladder():
    start = time.perf_counter()
    ok, parts = True, []
    for name, coeff in (("linear", CoefficientModel()), ("quasilinear", quasilinear_model())):
        rows = ladder(coeff)
        e1 = [r["e1"] for r in rows]
        rj = [r["r_jump"] for r in rows]
        last = rows[-1]
        good = monotone_halving(e1) and monotone_halving(rj) and last["grad_corrected"] < last["grad_plain"]
        ok &= good
        parts.append(f"{name}: e1 ratio {e1[-1] / e1[0]:.3f}, r_jump ratio {rj[-1] / rj[0]:.3f}, "
                     f"grad {last['grad_corrected']:.3e} < {last['grad_plain']:.3e}")
    assert record_criterion(5, "homogenization ladder", ok, "; ".join(parts), time.perf_counter() - start, 600)


# ---------------------------------------------------------------------------
# 6. quasilinear solver


def dense_picard(emesh, coeff, f, tol=1e-12, maxit=200):
    prob = FineProblem(emesh, coeff, f)
    free = np.setdiff1d(np.arange(prob.n1 + prob.n2), np.array(sorted(prob.fixed)))
    u, state = np.zeros(prob.n1 + prob.n2), None
    for _ in range(maxit):
        a = prob.matrix(state).toarray()
        new = np.zeros_like(u)
        new[free] = np.linalg.solve(a[np.ix_(free, free)], prob.load[free])
        done = np.linalg.norm(new - u) <= tol * max(np.linalg.norm(u), 1.0)
        u = state = new
        if done:
            return u
    raise AssertionError("dense reference iteration did not converge")


def test_criterion_6_quasilinear_solver():
    start = time.perf_counter()
    conv_ok, single_ok, worst_its, worst_res = True, True, 0, 0.0
    for path in SHIPPED:
        config = load_config(path)
        coeff = config.coefficient()
        s = config.solver
        for emesh in _emeshes(config):
            sol = solve_fine(emesh, coeff, _source(config, emesh.tiling), config.model.gamma, s.picard_tol, s.maxit)
            conv_ok &= sol.trace[-1] <= 1e-8 and sol.iterations <= 50
            worst_its = max(worst_its, sol.iterations)
            worst_res = max(worst_res, sol.trace[-1])
            if not coeff.depends_on_t:
                single_ok &= sol.iterations == 1
    oracle_err = 0.0
    for coeff in (CoefficientModel(), quasilinear_model(),
                  CoefficientModel("2 + sin(2*pi*y1)", "0.5", "0.5", "1.5 + 0.25*t^2/(1 + t^2)", alpha=0.5)):
        em = emesh_for(0.25, m=4)
        sol = solve_fine(em, coeff, ONE, picard_tol=1e-12)
        ref = dense_picard(em, coeff, ONE)
        oracle_err = max(oracle_err, np.linalg.norm(np.concatenate([sol.u1, sol.u2]) - ref) / np.linalg.norm(ref))
    ok = bool(conv_ok and single_ok and oracle_err <= 1e-8)
    detail = (f"{len(SHIPPED)} shipped configs, max iterations {worst_its} <= 50, max final update "
              f"{worst_res:.1e} <= 1e-8, t-independent single iteration {single_ok}, dense oracle {oracle_err:.1e}")
    assert record_criterion(6, "quasilinear Picard solver", ok, detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# 7. truncation diagnostics for L1 data


def test_criterion_7_truncation_diagnostics():
    start = time.perf_counter()
    bound = BASELINES["spike_energy_over_k"]["bound"]
    worst, decreasing = 0.0, True
    for eps in (0.125, 0.0625):
        em = emesh_for(eps)
        sol = solve_fine(em, CoefficientModel(), spike_source(em.tiling, (0.5, 0.5), 1.0))
        rows = truncation_diagnostics(sol, [1, 2, 4, 8])
        worst = max(worst, max(r["energy"] / r["k"] for r in rows))
        scaled = [r["scaled_energy"] for r in rows]
        decreasing &= all(b < a for a, b in zip(scaled, scaled[1:]))
    ok = worst <= bound and decreasing
    detail = f"max energy(T_k)/k {worst:.4f} <= {bound:.4f}, (1/k) int_(|u|<k) A grad u . grad u decreasing {decreasing}"
    assert record_criterion(7, "L1 truncation diagnostics", ok, detail, time.perf_counter() - start, 180)


# ---------------------------------------------------------------------------
# 8. determinism


def csv_bytes(report, out):
    report.write(out, ["csv"])
    return {p.name: p.read_bytes() for p in sorted(pathlib.Path(out).glob("*.csv"))}


def test_criterion_8_determinism(tmp_path):
    start = time.perf_counter()
    runs = [("linear.toml", c) for c in ("unfold-check", "extbench", "cell", "fine", "homog", "sweep")]
    runs.append(("spike.toml", "fine"))
    compared, mismatched = 0, []
    for cfg_name, command in runs:
        config = load_config(ROOT / "configs" / cfg_name)
        outputs = [csv_bytes(run(command, config, workers), tmp_path / f"{cfg_name}-{command}-{n}")
                   for n, workers in enumerate((1, 1, 2))]
        compared += len(outputs[0])
        if not (outputs[0] == outputs[1] == outputs[2]) or not outputs[0]:
            mismatched.append(f"{cfg_name}:{command}")
    ok = not mismatched
    detail = f"{compared} CSV files byte-identical across reruns and --workers 2" if ok else f"differ: {mismatched}"
    assert record_criterion(8, "determinism", ok, detail, time.perf_counter() - start)
