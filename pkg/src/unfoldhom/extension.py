"""Cell extension operators and their eps-periodic versions.

All harmonic fills share the Laplace matrix of one cell part, so each
operator factorizes it once and solves every cell of a paving in one batch.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .fem import N_QP, CoefficientModel, GridFunction, SubMesh, assemble_stiffness, cell_grid, cell_masks, grad_norm
from .unfolding import micro_mesh, unfold

FILL_TOL = 1e-10
_LAPLACE = CoefficientModel()


class _DirichletFill:
    """Discrete harmonic extension on ``mesh`` with prescribed ``fixed`` nodes."""

    def __init__(self, mesh, fixed_local):
        self.mesh = mesh
        k = assemble_stiffness(mesh, _LAPLACE).tocsr()
        self.fixed = np.asarray(fixed_local, dtype=np.int64)
        self.free = np.setdiff1d(np.arange(mesh.n_nodes), self.fixed)
        self.k_ff = k[self.free][:, self.free].tocsc()
        self.k_fd = k[self.free][:, self.fixed]
        self.lu = spla.splu(self.k_ff) if len(self.free) else None

    def solve(self, fixed_values):
        """``fixed_values`` has shape (batch, n_fixed); returns (batch, n_nodes)."""
        fixed_values = np.atleast_2d(fixed_values)
        out = np.zeros((fixed_values.shape[0], self.mesh.n_nodes))
        out[:, self.fixed] = fixed_values
        if self.lu is None:
            return out
        rhs = -(self.k_fd @ fixed_values.T)
        sol = self.lu.solve(np.asfortranarray(rhs))
        res = np.abs(self.k_ff @ sol - rhs).max() if rhs.size else 0.0
        scale = max(np.abs(rhs).max(), 1.0) if rhs.size else 1.0
        if not np.isfinite(sol).all() or res > FILL_TOL * scale:
            raise RuntimeError(f"harmonic fill failed (residual {res:.3e})")
        out[:, self.free] = sol.T
        return out


def _mean_weights(mesh):
    """Row vector w with w @ u = volume mean of u over ``mesh``."""
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.elements, np.broadcast_to(N_QP.sum(axis=0), mesh.elements.shape) * mesh.qp_weight)
    return w / mesh.measure


class CellExtension:
    """Extension operators S, P1, P2 and the collar operator on one cell mesh."""

    def __init__(self, cell, m, collar=None):
        if not cell.has_inclusion:
            raise ValueError("extension operators need a two-component cell")
        self.cell = cell
        self.m = (m, m) if np.isscalar(m) else tuple(m)
        self.Y = micro_mesh(cell, self.m, "Y")
        self.Y1 = micro_mesh(cell, self.m, "Y1")
        self.Y2 = micro_mesh(cell, self.m, "Y2")
        grid_ids_y1 = self.Y1.nodes
        gamma = np.intersect1d(self.Y1.nodes, self.Y2.nodes)
        self.gamma_ids = gamma
        outer = self.Y1.nodes[self.Y1.boundary_nodes()]
        self.outer_ids = outer
        # S: fill Y1 with data on Gamma and on the cell boundary
        fixed_s = np.concatenate([self.Y1.node_index[gamma], self.Y1.node_index[outer]])
        self._fill_y1 = _DirichletFill(self.Y1, fixed_s)
        self._n_gamma = len(gamma)
        # P1: fill Y2 with data on Gamma
        self._fill_y2 = _DirichletFill(self.Y2, self.Y2.node_index[gamma])
        self._mean_y2 = _mean_weights(self.Y2)
        self._collar = None
        self._collar_eta = None
        self._pos_y1 = self.Y.node_index[grid_ids_y1]
        self._pos_y2 = self.Y.node_index[self.Y2.nodes]
        if collar is not None:
            self.set_collar(collar)

    # -- S and P2 -----------------------------------------------------------

    def mean_y2(self, u):
        return np.atleast_2d(u) @ self._mean_y2

    def harmonic_fill(self, u, datum):
        """S: u on Y2, the harmonic fill of Y1 with data tr(u) on Gamma and ``datum`` on dY.

        ``u`` has shape (n_Y2,) or (batch, n_Y2); returns values on the Y mesh.
        """
        u2 = np.atleast_2d(np.asarray(u, dtype=float))
        datum = np.broadcast_to(np.asarray(datum, dtype=float), (u2.shape[0],))
        g = u2[:, self.Y2.node_index[self.gamma_ids]]
        fixed = np.concatenate([g, np.repeat(datum[:, None], len(self.outer_ids), axis=1)], axis=1)
        v = self._fill_y1.solve(fixed)
        out = np.empty((u2.shape[0], self.Y.n_nodes))
        out[:, self._pos_y1] = v
        out[:, self._pos_y2] = u2
        return out[0] if np.ndim(u) == 1 else out

    def extend_p2(self, u):
        """P2 u = M(u) + S(u - M(u)) with boundary datum -M(u); zero trace on dY.

        On closure(Y2) the result is ``u`` itself (M + (u - M) written without
        the round trip) and on dY it is exactly zero.
        """
        u2 = np.atleast_2d(np.asarray(u, dtype=float))
        mean = self.mean_y2(u2)
        sw = self.harmonic_fill(u2 - mean[:, None], -mean)
        out = np.atleast_2d(sw) + mean[:, None]
        out[:, self._pos_y2] = u2
        out[:, self.Y.node_index[self.outer_ids]] = 0.0
        return out[0] if np.ndim(u) == 1 else out

    # -- P1 -----------------------------------------------------------------

    def extend_p1(self, u):
        """Fill the hole Y2 harmonically from the Gamma trace of ``u`` (on Y1)."""
        u1 = np.atleast_2d(np.asarray(u, dtype=float))
        g = u1[:, self.Y1.node_index[self.gamma_ids]]
        v = self._fill_y2.solve(g)
        out = np.empty((u1.shape[0], self.Y.n_nodes))
        out[:, self._pos_y2] = v
        out[:, self._pos_y1] = u1
        return out[0] if np.ndim(u) == 1 else out

    # -- legacy collar operator ---------------------------------------------

    def set_collar(self, eta):
        """Build the collar {dist_inf(y, Y2) < eta} mesh; must conform and stay in Y1."""
        grid = cell_grid(self.cell, self.m)
        steps = []
        for d in range(2):
            s = eta / grid.spacing[d]
            if s < 1 - 1e-9:
                raise ValueError(f"collar width {eta} is below the mesh resolution {grid.spacing[d]}")
            if abs(s - round(s)) > 1e-9:
                raise ValueError(f"collar width {eta} is not a multiple of the mesh spacing {grid.spacing[d]}")
            steps.append(int(round(s)))
        inc = cell_masks(self.cell, self.m)["Y2"]
        a, b = np.nonzero(inc)
        lo = (a.min() - steps[0], b.min() - steps[1])
        hi = (a.max() + steps[0], b.max() + steps[1])
        if lo[0] < 1 or lo[1] < 1 or hi[0] > grid.shape[0] - 2 or hi[1] > grid.shape[1] - 2:
            raise ValueError(f"collar width {eta} reaches the cell boundary")
        band = np.zeros(grid.shape, dtype=bool)
        band[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1] = True
        band &= ~inc
        mesh = SubMesh(self.Y.grid, band, "collar")
        outer = np.setdiff1d(mesh.nodes, self.gamma_ids)
        inner_outer = outer[self._is_collar_edge(mesh, outer, lo, hi)]
        fixed = np.concatenate([mesh.node_index[self.gamma_ids], mesh.node_index[inner_outer]])
        self._collar = (mesh, _DirichletFill(mesh, fixed), inner_outer)
        self._collar_eta = eta

    @staticmethod
    def _is_collar_edge(mesh, ids, lo, hi):
        i, j = mesh.grid.node_ij(ids)
        return (i == lo[0]) | (i == hi[0] + 1) | (j == lo[1]) | (j == hi[1] + 1)

    def legacy_extend(self, u, eta=None):
        """Collar extension: harmonic in the collar, u on Y2, zero elsewhere."""
        if eta is not None and eta != self._collar_eta:
            self.set_collar(eta)
        if self._collar is None:
            self.set_collar(self.cell.periods[0] / 8)
        mesh, fill, outer = self._collar
        u2 = np.atleast_2d(np.asarray(u, dtype=float))
        g = u2[:, self.Y2.node_index[self.gamma_ids]]
        fixed = np.concatenate([g, np.zeros((u2.shape[0], len(outer)))], axis=1)
        v = fill.solve(fixed)
        out = np.zeros((u2.shape[0], self.Y.n_nodes))
        out[:, self.Y.node_index[mesh.nodes]] = v
        out[:, self._pos_y2] = u2
        return out[0] if np.ndim(u) == 1 else out

    def energy(self, values):
        """Dirichlet energy on Y of Y-mesh values (batched)."""
        v = np.atleast_2d(values)
        g = np.einsum("qdi,bei->beqd", self.Y.grad_operator(), v[:, self.Y.elements])
        return (g * g).sum(axis=(1, 2, 3)) * self.Y.qp_weight


# ---------------------------------------------------------------------------
# eps-periodic versions


@dataclass
class PeriodicExtension:
    """Result of a periodic extension: field on the whole domain mesh."""

    field: GridFunction
    max_jump: float
    cell_energies: np.ndarray


def extend_periodic(u, emesh, variant="P2", ops=None, mesh=None, eta=None):
    """Apply the cell operator in every paved cell and glue the results.

    The cell-wise rescaling ``u_k(y) = u(eps k_l + eps y)/eps`` followed by
    multiplication with ``eps`` cancels for linear operators, so the cell
    operator is applied to the cell restriction directly.  Outside the paved
    cells the result is zero.  ``max_jump`` is the largest disagreement
    between neighbouring cells at shared nodes.
    """
    if variant not in ("P1", "P2", "P2bar"):
        raise ValueError(f"unknown variant {variant!r}")
    cell = emesh.tiling.cell
    ops = ops or CellExtension(cell, emesh.m)
    if mesh is None:
        mesh = emesh.matrix if variant == "P1" else emesh.inclusions
    values = u.values if isinstance(u, GridFunction) else np.asarray(u, dtype=float)
    part = "Y1" if variant == "P1" else "Y2"
    local = unfold(values, emesh, part, mesh=mesh).values
    if variant == "P1":
        cell_vals = ops.extend_p1(np.atleast_2d(local))
    elif variant == "P2":
        cell_vals = ops.extend_p2(np.atleast_2d(local))
    else:
        cell_vals = ops.legacy_extend(np.atleast_2d(local), eta)
    cell_vals = np.atleast_2d(cell_vals)
    full = emesh.full
    out = np.zeros(full.n_nodes)
    seen = np.zeros(full.n_nodes, dtype=bool)
    max_jump = 0.0
    yi, yj = ops.Y.grid.node_ij(ops.Y.nodes)
    ij = np.stack([yi, yj], axis=-1)
    for c, k in enumerate(emesh.tiling.cells):
        idx = full.node_index[emesh.cell_node_ids(k, ij)]
        prev = seen[idx]
        if prev.any():
            max_jump = max(max_jump, float(np.abs(out[idx][prev] - cell_vals[c][prev]).max()))
        out[idx] = cell_vals[c]
        seen[idx] = True
    energies = ops.energy(cell_vals) * emesh.tiling.eps ** (emesh.tiling.dim - 2)
    return PeriodicExtension(GridFunction(full, out, "Omega"), max_jump, energies)


def cell_energy_on_mesh(field, emesh):
    """Dirichlet energy of a domain field restricted to each paved cell, by fine quadrature."""
    full = emesh.full
    g = full.gradients_at_qp(field.values)
    dens = (g * g).sum(axis=(1, 2)) * full.qp_weight
    m = emesh.m
    out = np.empty(emesh.tiling.n_cells)
    for c, k in enumerate(emesh.tiling.cells):
        a0, b0 = emesh.cell_element_ids(k)
        block = full.element_index[a0:a0 + m[0], b0:b0 + m[1]]
        out[c] = dens[block.ravel()].sum()
    return out


# ---------------------------------------------------------------------------
# norm ratio measurements


def _scatter_cells(emesh, mesh, micro, cell_values):
    """Fine nodal vector on ``mesh`` from per-cell micro values."""
    out = np.zeros(mesh.n_nodes)
    i, j = micro.grid.node_ij(micro.nodes)
    ij = np.stack([i, j], axis=-1)
    for c, k in enumerate(emesh.tiling.cells):
        out[mesh.node_index[emesh.cell_node_ids(k, ij)]] = cell_values[c]
    return out


def input_family(family, emesh, ops, rng):
    """Input on the inclusion mesh for a ratio benchmark."""
    n = emesh.tiling.n_cells
    mesh = emesh.inclusions
    if family == "zero-mean":
        vals = rng.standard_normal((n, ops.Y2.n_nodes))
        vals -= ops.mean_y2(vals)[:, None]
        return _scatter_cells(emesh, mesh, ops.Y2, vals)
    if family == "constant":
        c = rng.uniform(0.5, 1.5, size=n)
        return _scatter_cells(emesh, mesh, ops.Y2, np.repeat(c[:, None], ops.Y2.n_nodes, axis=1))
    if family == "smooth":
        return mesh.interpolate(lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]))
    if family == "zero":
        return np.zeros(mesh.n_nodes)
    raise ValueError(f"unknown input family {family!r}")


def _paved_mask(emesh, mesh):
    size = np.asarray(emesh.tiling.cell_size)
    centers = np.asarray(mesh.grid.origin) + (mesh.element_ij + 0.5) * np.asarray(mesh.grid.spacing)
    k = np.floor(centers / size).astype(int)
    paved = {tuple(c) for c in emesh.tiling.cells}
    return np.array([tuple(v) in paved for v in k], dtype=bool)


def source_norms(values, emesh):
    """(||grad u||, ||u||_H1) over the paved part of the inclusions."""
    mesh = emesh.inclusions
    keep = _paved_mask(emesh, mesh)
    g = mesh.gradients_at_qp(values)[keep]
    v = mesh.values_at_qp(values)[keep]
    gsq = float((g * g).sum() * mesh.qp_weight)
    vsq = float((v * v).sum() * mesh.qp_weight)
    return math.sqrt(gsq), math.sqrt(gsq + vsq)


def measure_ratio(variant, emeshes, family, seed=0, eta=None):
    """Rows (variant, eps, family, ratio) of ||grad P u||_{L2(Omega)} / denominator.

    The denominator is ||grad u|| on the paved inclusions for P2 and the
    H1 norm there for P2bar.  Degenerate inputs (zero denominator) give
    ``nan`` and are flagged as skipped.
    """
    rows = []
    ops = None
    for index, emesh in enumerate(emeshes):
        if ops is None or ops.m != tuple(emesh.m):
            ops = CellExtension(emesh.tiling.cell, emesh.m)
        rng = np.random.default_rng([seed, index])
        u = input_family(family, emesh, ops, rng)
        ext = extend_periodic(u, emesh, variant, ops=ops, eta=eta)
        num = grad_norm(emesh.full, ext.field.values)
        grad, h1 = source_norms(u, emesh)
        den = h1 if variant == "P2bar" else grad
        if den <= 1e-300:
            rows.append({"variant": variant, "eps": emesh.tiling.eps, "family": family, "ratio": math.nan,
                         "status": "skipped"})
            continue
        rows.append({"variant": variant, "eps": emesh.tiling.eps, "family": family, "ratio": num / den,
                     "status": "ok"})
    return rows


def fit_loglog_slope(eps, ratio):
    x = np.log(np.asarray(eps, dtype=float))
    y = np.log(np.asarray(ratio, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def flatness(ratios):
    """max/min - 1 over a ratio column."""
    r = np.asarray([v for v in ratios if np.isfinite(v)])
    if len(r) == 0:
        warnings.warn("no finite ratios to compare", RuntimeWarning, stacklevel=2)
        return math.nan
    return float(r.max() / r.min() - 1.0)
