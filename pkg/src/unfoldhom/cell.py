"""Periodic cell problem on the perforated cell and the homogenized tensor."""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (N_QP, GridFunction, SolverError, SparseSystem, assemble_stiffness, coefficient_at_qp,
                  integrate_edges)
from .geometry import cell_measures
from .unfolding import micro_mesh


class TableRangeWarning(UserWarning):
    pass


def _periodic_map(mesh):
    """Map local node -> periodic dof, identifying opposite faces of the cell grid."""
    i, j = mesh.grid.node_ij(mesh.nodes)
    nx, ny = mesh.grid.shape
    key = (i % nx) * ny + (j % ny)
    uniq, dof = np.unique(key, return_inverse=True)
    return dof, len(uniq)


def _gamma_weights(mesh):
    """Row g with g . u = mean of u over the interface edges of ``mesh``."""
    edges = mesh.interface
    if len(edges) == 0:
        return None
    w = np.zeros(mesh.n_nodes)
    # the edge integral of a nodal basis function is half the edge length
    half = 0.5 * edges.lengths
    np.add.at(w, mesh.node_index[edges.a], half)
    np.add.at(w, mesh.node_index[edges.b], half)
    return w / edges.total_length


def _volume_weights(mesh):
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.elements, np.broadcast_to(N_QP.sum(axis=0), mesh.elements.shape) * mesh.qp_weight)
    return w / mesh.measure


@dataclass(eq=False)
class CellSolution:
    """Corrector chi for one state ``t`` and direction ``lam`` on the periodic Y1 mesh."""

    t: float
    lam: np.ndarray
    chi: GridFunction
    energy: float
    residual: float
    constraint: str


class CellProblem:
    """Discrete cell problem ``int A(y,t) grad chi . grad v = int A(y,t) lam . grad v``.

    Unknowns live on the Y1 mesh with opposite faces identified.  ``constraint``
    selects the normalization: ``"gamma"`` (mean over the interface vanishes)
    or ``"volume"`` (mean over Y1 vanishes).  A cell without inclusion has no
    interface, so the volume mean is used there.
    """

    def __init__(self, cell, m, coeff, constraint="gamma"):
        self.cell = cell
        self.m = (m, m) if np.isscalar(m) else tuple(m)
        self.coeff = coeff
        self.mesh = micro_mesh(cell, self.m, "Y1")
        self.dof, self.n_dof = _periodic_map(self.mesh)
        self.prolong = sp.csr_matrix((np.ones(self.mesh.n_nodes), (np.arange(self.mesh.n_nodes), self.dof)),
                                     shape=(self.mesh.n_nodes, self.n_dof))
        if constraint == "gamma" and not cell.has_inclusion:
            constraint = "volume"
        if constraint not in ("gamma", "volume"):
            raise ValueError(f"unknown constraint {constraint!r}")
        self.constraint = constraint
        w = _gamma_weights(self.mesh) if constraint == "gamma" else _volume_weights(self.mesh)
        self.mean_row = self.prolong.T @ w
        self.measure_y = cell_measures(cell).Y

    def _operators(self, t):
        amat = coefficient_at_qp(self.mesh, self.coeff, t=t)
        k = self.prolong.T @ assemble_stiffness(self.mesh, self.coeff, t=t) @ self.prolong
        return amat, k.tocsr()

    def _load(self, amat, lam):
        g = self.mesh.grad_operator()
        flux = amat @ np.asarray(lam, dtype=float)  # (ne, 4, 2)
        be = np.einsum("eqa,qai->ei", flux, g) * self.mesh.qp_weight
        b = np.zeros(self.mesh.n_nodes)
        np.add.at(b, self.mesh.elements, be)
        return self.prolong.T @ b

    def solve(self, t, lams=((1.0, 0.0), (0.0, 1.0))):
        """Solve for every direction in ``lams``; returns a list of CellSolution."""
        amat, k = self._operators(t)
        out = []
        for lam in lams:
            lam = np.asarray(lam, dtype=float)
            b = self._load(amat, lam)
            system = SparseSystem(k, b, mean_row=self.mean_row, mean_value=0.0)
            try:
                x = system.solve()
            except SolverError as exc:
                raise SolverError(f"cell problem failed at t={t}: {exc}") from exc
            res = float(np.abs(k @ x - b).max())
            scale = max(float(np.abs(b).max()), 1.0)
            if res > 1e-10 * scale:
                raise SolverError(f"cell problem residual {res:.3e} at t={t}")
            chi = GridFunction(self.mesh, self.prolong @ x, "Y1")
            gq = self.mesh.gradients_at_qp(chi.values)
            energy = float(np.einsum("eqa,eqab,eqb->", gq, amat, gq) * self.mesh.qp_weight)
            out.append(CellSolution(float(t), lam, chi, energy, res, self.constraint))
        return out

    def tensor(self, t, solutions=None):
        """Flux-form tensor; column j is (1/|Y|) int_{Y1} A (e_j - grad chi^j)."""
        amat = coefficient_at_qp(self.mesh, self.coeff, t=t)
        if solutions is None:
            solutions = self.solve(t)
        a0 = np.empty((2, 2))
        for j, sol in enumerate(solutions):
            v = np.asarray(sol.lam) - self.mesh.gradients_at_qp(sol.chi.values)
            a0[:, j] = np.einsum("eqab,eqb->a", amat, v) * self.mesh.qp_weight / self.measure_y
        return a0

    def energy_tensor(self, t, solutions):
        """Energy form (1/|Y|) int_{Y1} A (e_j - grad chi^j) . (e_i - grad chi^i)."""
        amat = coefficient_at_qp(self.mesh, self.coeff, t=t)
        v = [np.asarray(s.lam) - self.mesh.gradients_at_qp(s.chi.values) for s in solutions]
        e = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                e[i, j] = np.einsum("eqa,eqab,eqb->", v[i], amat, v[j]) * self.mesh.qp_weight / self.measure_y
        return e

    def voigt_bound(self, t):
        """(1/|Y|) int_{Y1} A, the tensor of the competitor chi = 0."""
        amat = coefficient_at_qp(self.mesh, self.coeff, t=t)
        return amat.sum(axis=(0, 1)) * self.mesh.qp_weight / self.measure_y

    def interface_mean(self, chi):
        if not self.cell.has_inclusion:
            return 0.0
        return integrate_edges(self.mesh.interface, self.mesh, chi.values) / self.mesh.interface.total_length


def solve_cell(t, lam, cell, m, coeff, constraint="gamma"):
    return CellProblem(cell, m, coeff, constraint).solve(t, [lam])[0]


def homogenized_tensor(t, cell, m, coeff, constraint="gamma"):
    return CellProblem(cell, m, coeff, constraint).tensor(t)


def richardson(values, ratio=2.0):
    """Extrapolate the last entry of a sequence on meshes refined by ``ratio``.

    Returns ``(limit, order)`` with the order estimated from three levels; with
    two levels second order is assumed.
    """
    v = [np.asarray(x, dtype=float) for x in values]
    if len(v) < 2:
        raise ValueError("need at least two refinement levels")
    if len(v) == 2:
        p = 2.0
    else:
        d1 = np.linalg.norm(v[-2] - v[-3])
        d2 = np.linalg.norm(v[-1] - v[-2])
        if d2 == 0 or d1 == 0:
            return v[-1], math.inf
        p = math.log(d1 / d2) / math.log(ratio)
        if p <= 0:
            warnings.warn("refinement sequence is not converging; returning finest value")
            return v[-1], p
    return v[-1] + (v[-1] - v[-2]) / (ratio ** p - 1.0), p


# ---------------------------------------------------------------------------
# tabulation over the state variable


@dataclass(eq=False)
class HomogenizedTensorTable:
    """A0 on a sorted t-grid with piecewise linear interpolation.

    ``chi`` holds the nodal correctors for e1, e2 at every grid point, shape
    (n_t, 2, n_nodes of the Y1 mesh), or ``None`` when they were not kept.
    A ``constant`` table comes from a t-independent model and is valid for all t.
    """

    t: np.ndarray
    tensors: np.ndarray
    mesh: object = None
    chi: np.ndarray | None = None
    constant: bool = False
    clamp_warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.tensors = np.asarray(self.tensors, dtype=float)
        if len(self.t) < 1 or np.any(np.diff(self.t) <= 0):
            raise ValueError("t-grid must be strictly increasing")

    @property
    def t_range(self):
        return float(self.t[0]), float(self.t[-1])

    def _weights(self, s):
        s = np.asarray(s, dtype=float)
        if self.constant:
            z = np.zeros(s.shape, dtype=np.int64)
            return z, z, np.zeros(s.shape)
        lo, hi = self.t_range
        outside = (s < lo) | (s > hi)
        if np.any(outside):
            msg = f"state values in [{s.min():.4g}, {s.max():.4g}] clamped to table range [{lo:.4g}, {hi:.4g}]"
            self.clamp_warnings.append(msg)
            warnings.warn(msg, TableRangeWarning, stacklevel=3)
        s = np.clip(s, lo, hi)
        if len(self.t) == 1:
            z = np.zeros(s.shape, dtype=np.int64)
            return z, z, np.zeros(s.shape)
        i = np.clip(np.searchsorted(self.t, s, side="right") - 1, 0, len(self.t) - 2)
        w = (s - self.t[i]) / (self.t[i + 1] - self.t[i])
        return i, i + 1, w

    def __call__(self, s):
        """A0 at states ``s`` (any shape); result shape s.shape + (2, 2)."""
        i, j, w = self._weights(s)
        w = w[..., None, None]
        return (1 - w) * self.tensors[i] + w * self.tensors[j]

    def chi_at(self, s):
        """Interpolated correctors, shape s.shape + (2, n_nodes)."""
        if self.chi is None:
            raise ValueError("table was built without correctors")
        i, j, w = self._weights(s)
        w = w[..., None, None]
        return (1 - w) * self.chi[i] + w * self.chi[j]

    def min_eigenvalues(self):
        sym = 0.5 * (self.tensors + np.swapaxes(self.tensors, -1, -2))
        return np.linalg.eigvalsh(sym)[:, 0]

    @property
    def alpha0(self):
        return float(self.min_eigenvalues().min())

    def lipschitz(self):
        if len(self.t) < 2:
            return 0.0
        d = np.linalg.norm(np.diff(self.tensors, axis=0), ord=2, axis=(-2, -1))
        return float((d / np.diff(self.t)).max())

    def symmetry_defect(self):
        return float(np.abs(self.tensors - np.swapaxes(self.tensors, -1, -2)).max())

    def to_csv(self, path):
        lam = self.min_eigenvalues()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "a11", "a12", "a21", "a22", "min_eig"])
            for t, a, e in zip(self.t, self.tensors, lam):
                w.writerow([repr(float(t)), *(repr(float(v)) for v in a.ravel()), repr(float(e))])


def _tensor_job(args):
    cell, m, coeff, constraint, t = args
    prob = CellProblem(cell, m, coeff, constraint)
    sols = prob.solve(t)
    return prob.tensor(t, sols), np.stack([s.chi.values for s in sols])


def tabulate(coeff, cell, m, t_range=(0.0, 0.0), samples=2, constraint="gamma", workers=1, keep_chi=True):
    """Solve the cell problem on a uniform t-grid and collect A0 and chi.

    A t-independent coefficient is solved once and the result repeated.
    """
    lo, hi = float(t_range[0]), float(t_range[1])
    if samples < 1:
        raise ValueError("need at least one sample")
    if hi < lo:
        raise ValueError(f"empty t-range {t_range}")
    t = np.linspace(lo, hi, samples) if hi > lo else np.array([lo])
    if not coeff.depends_on_t:
        a0, chi = _tensor_job((cell, m, coeff, constraint, t[0]))
        tensors = np.repeat(a0[None], len(t), axis=0)
        chis = np.repeat(chi[None], len(t), axis=0)
    else:
        jobs = [(cell, m, coeff, constraint, float(s)) for s in t]
        results = []
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_tensor_job, job) for job in jobs]
                for s, fut in zip(t, futures):
                    try:
                        results.append(fut.result())
                    except SolverError as exc:
                        raise SolverError(f"tabulation failed at t={s}: {exc}") from exc
        else:
            for job in jobs:
                try:
                    results.append(_tensor_job(job))
                except SolverError as exc:
                    raise SolverError(f"tabulation failed at t={job[-1]}: {exc}") from exc
        tensors = np.stack([r[0] for r in results])
        chis = np.stack([r[1] for r in results])
    mesh = micro_mesh(cell, (m, m) if np.isscalar(m) else tuple(m), "Y1")
    return HomogenizedTensorTable(t, tensors, mesh, chis if keep_chi else None, constant=not coeff.depends_on_t)


# ---------------------------------------------------------------------------
# corrector


def corrector(grad_u, state, table):
    """Nodal corrector -sum_j chi^j(y, u(x)) d_j u(x) on the Y1 mesh.

    ``grad_u`` has shape (..., 2) and ``state`` shape (...); the result has
    shape (..., n_nodes).
    """
    chi = table.chi_at(state)
    return -np.einsum("...jn,...j->...n", chi, np.asarray(grad_u, dtype=float))


def corrector_gradient(grad_u, state, table):
    """grad_y of the corrector at the micro quadrature points, shape (..., ne, 4, 2)."""
    chi = table.chi_at(state)
    mesh = table.mesh
    g = mesh.grad_operator()
    ce = chi[..., mesh.elements]  # (..., 2, ne, 4)
    grads = np.einsum("qdi,...jei->...jeqd", g, ce)
    return -np.einsum("...jeqd,...j->...eqd", grads, np.asarray(grad_u, dtype=float))
