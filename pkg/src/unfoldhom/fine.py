"""Two-component eps-problem with an interfacial barrier, solved by Picard iteration."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .fem import (ConvergenceError, SingularSystemError, SparseSystem, assemble_interface_coupling,
                  assemble_load, assemble_stiffness, coefficient_at_qp)

STAGNATION = 10


@dataclass(eq=False)
class FineSolution:
    """Converged pair (u1 on the matrix mesh, u2 on the inclusion mesh)."""

    emesh: object
    coeff: object
    u1: np.ndarray
    u2: np.ndarray
    gamma: float
    trace: list
    damped: bool
    load: np.ndarray = field(repr=False, default=None)
    source: object = field(repr=False, default=None)

    @property
    def eps(self):
        return self.emesh.tiling.eps

    @property
    def iterations(self):
        return len(self.trace)

    @property
    def interface_scale(self):
        return self.eps ** self.gamma

    def full_u1(self):
        """u1 prolonged to the whole grid (zero at inclusion-only nodes)."""
        return self.emesh.matrix.prolong(self.u1)

    def energies(self):
        """Volume energies per component, interface term and the load work."""
        e1 = _a_energy(self.emesh.matrix, self.coeff, self.u1, self.u1, self.eps)
        mesh2 = self.emesh.inclusions
        e2 = _a_energy(mesh2, self.coeff, self.u2, self.u2, self.eps) if mesh2 is not None else 0.0
        jump = interface_form(self, self.u1, self.u2, self.u1, self.u2)
        work = float(self.load @ np.concatenate([self.u1, self.u2])) if self.load is not None else math.nan
        return {"volume1": e1, "volume2": e2, "interface": jump, "work": work}

    def balance_residual(self):
        e = self.energies()
        lhs = e["volume1"] + e["volume2"] + e["interface"]
        return abs(lhs - e["work"]) / max(abs(e["work"]), 1e-300)

    def jump_l2(self):
        return math.sqrt(_edge_product(self.emesh, self.u1, self.u2, self.u1, self.u2, None))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "component", "value"])
            for name, mesh, vals in (("1", self.emesh.matrix, self.u1), ("2", self.emesh.inclusions, self.u2)):
                if mesh is None:
                    continue
                for (x1, x2), v in zip(mesh.coords, vals):
                    w.writerow([repr(float(x1)), repr(float(x2)), name, repr(float(v))])

    def summary(self):
        e = self.energies()
        return {
            "eps": self.eps,
            "iterations": self.iterations,
            "damped": self.damped,
            "final_update": self.trace[-1] if self.trace else 0.0,
            "energies": e,
            "h1eps_norm": h1eps_norm(self),
            "jump_l2": self.jump_l2(),
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _a_energy(mesh, coeff, state_values, values, eps, other=None):
    """int A(x/eps, state) grad(values) . grad(other or values)."""
    amat = coefficient_at_qp(mesh, coeff, state=state_values, eps=eps)
    g = mesh.gradients_at_qp(values)
    h = g if other is None else mesh.gradients_at_qp(other)
    return float(np.einsum("eqa,eqab,eqb->", h, amat, g) * mesh.qp_weight)


def _edge_traces(emesh, u1, u2):
    edges = emesh.inclusions.interface
    m1, m2 = emesh.matrix, emesh.inclusions
    d_a = u1[m1.node_index[edges.a]] - u2[m2.node_index[edges.a]]
    d_b = u1[m1.node_index[edges.b]] - u2[m2.node_index[edges.b]]
    return edges, edges.values_at_qp(d_a, d_b)


def _edge_product(emesh, u1, u2, v1, v2, weight):
    """int_Gamma w (u1 - u2)(v1 - v2) with the linear traces sampled at Gauss points."""
    if emesh.inclusions is None:
        return 0.0
    edges, du = _edge_traces(emesh, u1, u2)
    _, dv = _edge_traces(emesh, v1, v2)
    _, w = edges.quadrature_points()
    if weight is not None:
        w = w * weight
    return float((du * dv * w).sum())


def interface_form(sol, u1, u2, v1, v2):
    """eps^gamma int_Gamma h (u1 - u2)(v1 - v2)."""
    if sol.emesh.inclusions is None:
        return 0.0
    pts, _ = sol.emesh.inclusions.interface.quadrature_points()
    hq = sol.coeff.conductance(pts / sol.eps)
    return sol.interface_scale * _edge_product(sol.emesh, u1, u2, v1, v2, hq)


def h1eps_norm_sq(sol, u1=None, u2=None):
    """|grad u1|^2 + |grad u2|^2 + eps |u1 - u2|^2_{L2(Gamma)}."""
    u1 = sol.u1 if u1 is None else u1
    u2 = sol.u2 if u2 is None else u2
    em = sol.emesh
    g1 = em.matrix.gradients_at_qp(u1)
    total = float((g1 * g1).sum() * em.matrix.qp_weight)
    if em.inclusions is not None:
        g2 = em.inclusions.gradients_at_qp(u2)
        total += float((g2 * g2).sum() * em.inclusions.qp_weight)
        total += sol.eps * _edge_product(em, u1, u2, u1, u2, None)
    return total


def h1eps_norm(sol, u1=None, u2=None):
    return math.sqrt(h1eps_norm_sq(sol, u1, u2))


# ---------------------------------------------------------------------------
# sources


@dataclass(frozen=True)
class ConstantSource:
    value: float = 1.0

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], float(self.value))


@dataclass(frozen=True, eq=False)
class ExpressionSource:
    """Source from an expression over ``x1, x2``."""

    expr: object

    def __call__(self, x):
        return self.expr.evaluate(np.shape(x)[:-1], x1=x[..., 0], x2=x[..., 1])


@dataclass(frozen=True, eq=False)
class SpikeSource:
    """Constant ``height`` on the box [lo, hi], zero elsewhere."""

    lo: np.ndarray
    hi: np.ndarray
    height: float
    cell: tuple

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        return np.where(inside, self.height, 0.0)


def constant_source(value=1.0):
    return ConstantSource(float(value))


def expression_source(expr):
    return ExpressionSource(expr)


def spike_source(tiling, center=(0.5, 0.5), mass=1.0):
    """Indicator of the eps-cell containing ``center`` scaled to total ``mass``."""
    size = np.asarray(tiling.cell_size)
    k = np.floor(np.asarray(center, dtype=float) / size + 1e-12)
    lo = k * size
    return SpikeSource(lo, lo + size, mass / float(np.prod(size)), tuple(int(v) for v in k))


# ---------------------------------------------------------------------------
# solver


def _check_inclusions_coupled(emesh, coupling):
    """Raise when some inclusion has zero total conductance (floating Neumann block)."""
    mesh2 = emesh.inclusions
    n1 = emesh.matrix.n_nodes
    adj = assemble_stiffness(mesh2, _unit_coeff())
    n_comp, labels = connected_components(adj != 0, directed=False)
    # row sums of the u2-u2 block of the coupling are int h phi_i ds >= 0
    link = np.asarray(coupling[n1:, n1:].sum(axis=1)).ravel()
    strength = np.bincount(labels, weights=link, minlength=n_comp)
    scale = max(float(np.abs(link).max()), 1e-300)
    bad = np.nonzero(strength <= 1e-14 * scale)[0] if link.any() else np.arange(n_comp)
    if len(bad):
        node = mesh2.nodes[np.nonzero(labels == bad[0])[0][0]]
        x = emesh.grid.node_coords(np.array([node]))[0]
        raise SingularSystemError(
            f"{len(bad)} inclusion(s) are decoupled from the matrix (zero conductance), e.g. near x={x.tolist()}; "
            "the inclusion values are determined only up to constants")


def _unit_coeff():
    from .fem import CoefficientModel

    return CoefficientModel()


class FineProblem:
    """Assembled pieces of the eps-problem that do not depend on the state."""

    def __init__(self, emesh, coeff, f, gamma=1.0):
        self.emesh = emesh
        self.coeff = coeff
        self.f = f
        self.gamma = float(gamma)
        eps = emesh.tiling.eps
        self.eps = eps
        self.m1 = emesh.matrix
        self.m2 = emesh.inclusions
        self.n1 = self.m1.n_nodes
        self.n2 = 0 if self.m2 is None else self.m2.n_nodes
        if self.m2 is not None:
            self.coupling = assemble_interface_coupling(self.m1, self.m2, self.m2.interface, coeff, eps, self.gamma)
            _check_inclusions_coupled(emesh, self.coupling)
        else:
            self.coupling = sp.csr_matrix((self.n1, self.n1))
        load = [assemble_load(self.m1, f)]
        if self.m2 is not None:
            load.append(assemble_load(self.m2, f))
        self.load = np.concatenate(load)
        bnd = self.m1.boundary_nodes()
        self.fixed = {int(i): 0.0 for i in bnd}

    def matrix(self, u=None):
        """Stiffness with A frozen at the state ``u`` (``None`` means t = 0)."""
        s1 = None if u is None else u[:self.n1]
        k1 = assemble_stiffness(self.m1, self.coeff, state=s1, eps=self.eps)
        blocks = [k1]
        if self.m2 is not None:
            s2 = None if u is None else u[self.n1:]
            blocks.append(assemble_stiffness(self.m2, self.coeff, state=s2, eps=self.eps))
        return (sp.block_diag(blocks, format="csr") + self.coupling).tocsr()

    def linear_solve(self, u=None, tol=1e-12, x0=None, method="cg"):
        a = self.matrix(u)
        if method == "cg":
            return SparseSystem(a, self.load, self.fixed).solve(tol=tol, x0=x0)
        if method == "dense":
            n = a.shape[0]
            free = np.setdiff1d(np.arange(n), np.fromiter(self.fixed, dtype=np.int64))
            dense = a.toarray()
            x = np.zeros(n)
            x[free] = np.linalg.solve(dense[np.ix_(free, free)], self.load[free])
            return x
        raise ValueError(f"unknown linear method {method!r}")


def _rel_update(new, old):
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1.0))


def picard(solve, n, depends_on_t, tol=1e-8, maxit=50, damping=0.5):
    """Frozen-coefficient fixed point iteration.

    ``solve(state, x0)`` returns the linear solution with A frozen at
    ``state`` (``None`` means t = 0).  The first iterate is the solve at t = 0;
    iteration k compares the new iterate with the state it was assembled at.
    After ``STAGNATION`` iterations without progress the update is damped.
    Returns ``(u, trace, damped)``.
    """
    u = solve(None, None)
    trace = [_rel_update(u, np.zeros(n))]
    if not depends_on_t or trace[0] <= tol:
        trace[0] = 0.0 if not depends_on_t else trace[0]
        return u, trace, False
    omega, damped, best, stall = 1.0, False, math.inf, 0
    while len(trace) < maxit:
        new = solve(u, u)
        step = _rel_update(new, u)
        trace.append(step)
        u = u + omega * (new - u)
        if step <= tol:
            return u, trace, damped
        if step < best * (1 - 1e-3):
            best, stall = step, 0
        else:
            stall += 1
            if stall >= STAGNATION and not damped:
                omega, damped, stall = damping, True, 0
    raise ConvergenceError(f"Picard iteration did not converge in {maxit} iterations "
                           f"(last update {trace[-1]:.3e})", trace)


def solve_fine(emesh, coeff, f, gamma=1.0, picard_tol=1e-8, maxit=50, linear_tol=1e-12, method="cg", damping=0.5):
    """Solve the eps-problem on ``emesh``.

    ``f`` is a callable on points (..., 2).  u1 vanishes on the outer
    boundary; the two components are coupled through eps^gamma h on Gamma.
    """
    prob = FineProblem(emesh, coeff, f, gamma)
    n = prob.n1 + prob.n2

    def solve(state, x0):
        return prob.linear_solve(state, tol=linear_tol, x0=x0, method=method)

    u, trace, damped = picard(solve, n, coeff.depends_on_t, picard_tol, maxit, damping)
    return FineSolution(emesh, coeff, u[:prob.n1].copy(), u[prob.n1:].copy(), prob.gamma, trace, damped,
                        prob.load, f)


# ---------------------------------------------------------------------------
# truncation diagnostics


def truncate(u, k):
    return np.clip(u, -k, k)


def truncation_diagnostics(sol, k_list):
    """Per level k: energies of T_k(u), interface dissipation, balance and tails.

    ``energy`` is the squared H1-eps norm of T_k(u); ``a_energy`` the A-weighted
    volume energy; ``dissipation`` is eps^gamma int h (u1 - u2)(T_k u1 - T_k u2);
    ``balance`` is |int A grad u . grad T_k(u) + dissipation - int f T_k(u)|;
    ``tail_energy`` is the A-energy carried by {|u| > k}; ``scaled_energy`` is (1/k) int_{|u|<k} A grad u . grad u.
    """
    k_list = [float(k) for k in k_list]
    if any(b <= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError("k_list must be increasing")
    em = sol.emesh
    parts = [(em.matrix, sol.u1)]
    if em.inclusions is not None:
        parts.append((em.inclusions, sol.u2))
    full = np.concatenate([sol.u1, sol.u2])
    rows = []
    for k in k_list:
        t1, t2 = truncate(sol.u1, k), truncate(sol.u2, k)
        a_energy = cross = below = tail = 0.0
        for mesh, u in parts:
            amat = coefficient_at_qp(mesh, sol.coeff, state=u, eps=sol.eps)
            g = mesh.gradients_at_qp(u)
            gt = mesh.gradients_at_qp(truncate(u, k))
            a_energy += float(np.einsum("eqa,eqab,eqb->", gt, amat, gt) * mesh.qp_weight)
            cross += float(np.einsum("eqa,eqab,eqb->", gt, amat, g) * mesh.qp_weight)
            dens = np.einsum("eqa,eqab,eqb->eq", g, amat, g) * mesh.qp_weight
            level = np.abs(mesh.values_at_qp(u))
            below += float(dens[level < k].sum())
            tail += float(dens[level > k].sum())
        diss = interface_form(sol, sol.u1, sol.u2, t1, t2)
        work = float(sol.load @ truncate(full, k))
        rows.append({
            "k": k,
            "energy": h1eps_norm_sq(sol, t1, t2),
            "a_energy": a_energy,
            "dissipation": diss,
            "balance": abs(cross + diss - work),
            "tail_energy": tail,
            "scaled_energy": below / k,
        })
    return rows


def fit_slope(x, y):
    """Least-squares slope of y against x through the origin."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float((x @ y) / (x @ x))
