"""Homogenized problem, reconstruction of the inclusion limit and two-scale residuals."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cell import corrector_gradient, tabulate
from .fem import Grid, SparseSystem, SubMesh, assemble_load, assemble_tensor_field
from .fine import picard
from .geometry import Box, cell_measures
from .unfolding import cell_gauss_points, micro_mesh, two_scale_l2, unfold, unfolded_gradient


def reference_mesh(domain, n):
    """Uniform n x n Q1 mesh of the box ``domain``."""
    n = (n, n) if np.isscalar(n) else tuple(n)
    h = tuple((hi - lo) / k for lo, hi, k in zip(domain.low, domain.high, n))
    grid = Grid(tuple(domain.low), h, n)
    return SubMesh(grid, np.ones(n, dtype=bool), "Omega")


def interface_mean_conductance(cell, coeff, m):
    """M_Gamma(h) by edge quadrature on the cell interface."""
    mesh = micro_mesh(cell, (m, m) if np.isscalar(m) else tuple(m), "Y1")
    edges = mesh.interface
    if len(edges) == 0:
        raise ValueError("cell has no interface")
    pts, w = edges.quadrature_points()
    return float((coeff.conductance(pts) * w).sum() / edges.total_length)


def jump_offset(cell, mean_h):
    """|Y2| / (|Gamma| M_Gamma(h)), the factor multiplying f in the inclusion limit."""
    if not mean_h > 0:
        raise ValueError(f"mean interface conductance must be positive, got {mean_h}")
    m = cell_measures(cell)
    return m.Y2 / (m.Gamma * mean_h)


def reconstruct_u2(u1, f_values, cell, mean_h):
    """u2 = u1 + |Y2| / (|Gamma| M_Gamma(h)) f, pointwise."""
    return np.asarray(u1, dtype=float) + jump_offset(cell, mean_h) * np.asarray(f_values, dtype=float)


def table_range(values, pad=0.2):
    """Observed range of ``values`` padded by ``pad`` of its span on both sides."""
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo
    if span == 0:
        span = max(abs(lo), 1.0)
    return lo - pad * span, hi + pad * span


@dataclass(eq=False)
class HomogenizedSolution:
    mesh: SubMesh
    u1: np.ndarray
    table: object
    trace: list
    f: object
    u2: np.ndarray | None = None
    offset: float = 0.0
    warnings: list = field(default_factory=list)

    @property
    def grid(self):
        return self.mesh.grid

    @property
    def iterations(self):
        return len(self.trace)

    def value(self, x):
        return self.grid.interpolate(self.u1, x)

    def gradient(self, x):
        return self.grid.interpolate_gradient(self.u1, x)

    def u2_value(self, x):
        return self.value(x) + self.offset * np.asarray(self.f(x), dtype=float)


def solve_homogenized(table, f, mesh, picard_tol=1e-8, maxit=50, linear_tol=1e-12, depends_on_t=None, damping=0.5):
    """Picard iteration for -div(A0(u) grad u) = f, u = 0 on the boundary of ``mesh``."""
    load = assemble_load(mesh, f)
    fixed = {int(i): 0.0 for i in mesh.boundary_nodes()}
    if depends_on_t is None:
        depends_on_t = bool(np.ptp(table.tensors, axis=0).max() > 0)
    n_warn = len(table.clamp_warnings)

    def solve(state, x0):
        s = np.zeros((mesh.n_elements, 4)) if state is None else mesh.values_at_qp(state)
        amat = table(s)
        return SparseSystem(assemble_tensor_field(mesh, amat), load, fixed).solve(tol=linear_tol, x0=x0)

    u, trace, _ = picard(solve, mesh.n_nodes, depends_on_t, picard_tol, maxit, damping)
    return HomogenizedSolution(mesh, u, table, trace, f, warnings=table.clamp_warnings[n_warn:])


def homogenize(coeff, cell, m, f, mesh, samples=21, picard_tol=1e-8, maxit=50, workers=1, pad=0.2, damping=0.5):
    """Tabulate A0 over the padded solution range, solve and reconstruct u2.

    The range comes from a provisional solve with A0(0); a t-independent
    model needs only the single tensor.
    """
    if coeff.depends_on_t:
        probe = tabulate(coeff, cell, m, (0.0, 0.0), 1)
        probe.constant = True  # deliberately A0(0) everywhere
        first = solve_homogenized(probe, f, mesh, picard_tol, maxit, depends_on_t=False)
        values = np.append(first.u1, 0.0)
        table = tabulate(coeff, cell, m, table_range(values, pad), samples, workers=workers)
    else:
        table = tabulate(coeff, cell, m, (0.0, 0.0), 1)
    sol = solve_homogenized(table, f, mesh, picard_tol, maxit, depends_on_t=coeff.depends_on_t, damping=damping)
    if cell.has_inclusion:
        mean_h = interface_mean_conductance(cell, coeff, m)
        sol.offset = jump_offset(cell, mean_h)
        sol.u2 = reconstruct_u2(sol.u1, f(mesh.coords), cell, mean_h)
    return sol


# ---------------------------------------------------------------------------
# two-scale comparison of the eps-solution with the limit


def _cell_weight(emesh):
    return emesh.tiling.eps ** 2 * math.prod(emesh.tiling.cell.periods)


def two_scale_residuals(fine, homog, order=3):
    """Distances between the eps-solution and the two-scale limit.

    Returns a dict with ``e1``, ``e2``, ``r_jump``, ``osc2`` (oscillation energy of
    the unfolded inclusion gradient about its cell mean), ``mean2`` (energy of
    those cell means), ``grad_plain`` and ``grad_corrected`` (unfolded matrix
    gradient against grad u1 without and with the corrector).
    """
    em = fine.emesh
    cell = em.tiling.cell
    if np.any(np.asarray(homog.grid.origin) != np.asarray(em.tiling.domain.low)):
        raise ValueError("homogenized mesh and eps-mesh cover different domains")
    micro1 = micro_mesh(cell, em.m, "Y1")
    t1 = unfold(fine.u1, em, "Y1", mesh=em.matrix)

    def u1_of_x(x, y):
        return homog.value(x[..., 0, 0, :])[:, :, None, None]

    out = {"eps": em.tiling.eps}
    out["e1"] = two_scale_l2(t1.at_qp(), micro1, em, u1_of_x, order)
    xq, wx = cell_gauss_points(em, order)
    grad_x = homog.gradient(xq)
    state_x = homog.value(xq)
    g1 = unfolded_gradient(fine.u1, em, "Y1", mesh=em.matrix)
    out["grad_plain"] = two_scale_l2(g1, micro1, em, lambda x, y: grad_x[:, :, None, None, :], order)
    if homog.table.chi is not None and homog.table.mesh.n_nodes == micro1.n_nodes:
        corr = corrector_gradient(grad_x, state_x, homog.table)
        out["grad_corrected"] = two_scale_l2(g1, micro1, em, lambda x, y: grad_x[:, :, None, None, :] + corr, order)
    else:
        out["grad_corrected"] = math.nan
    if em.inclusions is None or not cell.has_inclusion:
        out.update(e2=math.nan, r_jump=math.nan, osc2=math.nan, mean2=math.nan)
        return out
    micro2 = micro_mesh(cell, em.m, "Y2")
    t2 = unfold(fine.u2, em, "Y2", mesh=em.inclusions)
    out["e2"] = two_scale_l2(t2.at_qp(), micro2, em, lambda x, y: homog.u2_value(x[..., 0, 0, :])[:, :, None, None],
                             order)
    # cell means of T2(u2) over Y2 against u1 + offset * f at the x-Gauss points
    q2 = t2.at_qp()
    means = q2.mean(axis=(1, 2))
    target = homog.u2_value(xq)
    out["r_jump"] = math.sqrt(float(((means[:, None] - target) ** 2 * wx[None, :]).sum()))
    g2 = unfolded_gradient(fine.u2, em, "Y2", mesh=em.inclusions)
    gmean = g2.mean(axis=(1, 2))
    dev = g2 - gmean[:, None, None, :]
    out["osc2"] = float((dev * dev).sum() * micro2.qp_weight * _cell_weight(em))
    out["mean2"] = float((gmean * gmean).sum() * micro2.measure * _cell_weight(em))
    return out


def ladder_to_csv(rows, path):
    cols = ["eps", "e1", "e2", "r_jump", "osc2", "mean2", "grad_plain", "grad_corrected"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in cols])


# ---------------------------------------------------------------------------
# limit weak form and the truncation surrogate


def _coarse_hats(domain, n):
    """Interior hat functions of an n x n coarse grid and their gradients, as callables."""
    grid = Grid(tuple(domain.low), tuple((hi - lo) / n for lo, hi in zip(domain.low, domain.high)), (n, n))
    hats = []
    for i in range(1, n):
        for j in range(1, n):
            vals = np.zeros(grid.n_nodes)
            vals[grid.node_id(i, j)] = 1.0
            hats.append(vals)
    return grid, hats


CELL_MODES = (
    lambda y, p: (np.cos(2 * np.pi * y[..., 0] / p[0]), np.stack(
        [-2 * np.pi / p[0] * np.sin(2 * np.pi * y[..., 0] / p[0]), 0 * y[..., 1]], axis=-1)),
    lambda y, p: (np.sin(2 * np.pi * y[..., 1] / p[1]), np.stack(
        [0 * y[..., 0], 2 * np.pi / p[1] * np.cos(2 * np.pi * y[..., 1] / p[1])], axis=-1)),
)


def limit_residual(homog, coeff, cell, n_test=4, n_quad=16, order=3):
    """Largest relative residual of the unfolded limit form over a test battery.

    Tests are coarse hats phi(x) paired with Phi = 0 and with Phi = phi(x) psi(y)
    for two periodic modes psi.  Each residual is divided by the size of the
    terms it balances.
    """
    domain_low = np.asarray(homog.grid.origin)
    extent = np.asarray(homog.grid.spacing) * np.asarray(homog.grid.shape)
    domain = Box(tuple(domain_low), tuple(domain_low + extent))
    g, w = np.polynomial.legendre.leggauss(order)
    g, w = 0.5 * (g + 1), 0.5 * w
    size = extent / n_quad
    a, b = np.meshgrid(np.arange(n_quad), np.arange(n_quad), indexing="ij")
    gx, gy = np.meshgrid(g, g, indexing="ij")
    xq = (domain_low + size * np.stack([a.ravel(), b.ravel()], -1)[:, None, :]
          + size * np.stack([gx.ravel(), gy.ravel()], -1)[None, :, :]).reshape(-1, 2)
    wx = np.tile(np.outer(w, w).ravel(), n_quad * n_quad) * float(np.prod(size))
    micro = homog.table.mesh
    yq = micro.quadrature_points()
    grad = homog.gradient(xq)
    state = homog.value(xq)
    corr = corrector_gradient(grad, state, homog.table)  # (nx, ne, 4, 2)
    total = grad[:, None, None, :] + corr
    amat = coeff.matrix(yq[None], state[:, None, None])
    flux = np.einsum("xeqab,xeqb->xeqa", amat, total)
    vol_y = cell_measures(cell).Y
    fx = np.asarray(homog.f(xq), dtype=float)
    coarse, hats = _coarse_hats(domain, n_test)
    worst = 0.0
    for vals in hats:
        phi = coarse.interpolate(vals, xq)
        dphi = coarse.interpolate_gradient(vals, xq)
        tests = [dphi[:, None, None, :] + 0 * yq[None]]
        for mode in CELL_MODES:
            _, dpsi = mode(yq, cell.periods)
            tests.append(phi[:, None, None, None] * dpsi[None])
        rhs_terms = [float((fx * phi * wx).sum()), 0.0, 0.0]
        for test, rhs in zip(tests, rhs_terms):
            dens = np.einsum("xeqa,xeqa->x", flux, test) * micro.qp_weight
            lhs = float((dens * wx).sum()) / vol_y
            mag = float((np.abs(np.einsum("xeqa,xeqa->xeq", flux, test)).sum(axis=(1, 2)) * micro.qp_weight
                         * wx).sum()) / vol_y
            worst = max(worst, abs(lhs - rhs) / max(mag, abs(rhs), 1e-300))
    return worst


def homogenized_truncation(homog, k_list):
    """(1/k) int_{|u1|<k} A0(u1) grad u1 . grad u1 for each k."""
    mesh = homog.mesh
    s = mesh.values_at_qp(homog.u1)
    g = mesh.gradients_at_qp(homog.u1)
    dens = np.einsum("eqa,eqab,eqb->eq", g, homog.table(s), g) * mesh.qp_weight
    return [{"k": float(k), "scaled_energy": float(dens[np.abs(s) < k].sum()) / k} for k in k_list]
