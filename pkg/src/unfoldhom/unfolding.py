"""Discrete periodic unfolding on conforming eps-meshes.

Because the fine mesh spacing is ``eps*l/m`` and the cell mesh spacing is
``l/m``, every micro node ``y`` of cell ``k`` coincides with the fine node
``eps*k_l + eps*y``.  Unfolding is therefore a pure re-indexing of nodal
values and the algebraic identities of the unfolding operator hold to
rounding error.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fem import N_QP, Edges, GridFunction, SubMesh, cell_masks, cell_mesh

PARTS = ("Y", "Y1", "Y2")


@lru_cache(maxsize=64)
def micro_mesh(cell, m, part):
    return cell_mesh(cell, m, part)


@dataclass(eq=False)
class UnfoldedField:
    """Values on (paved cells) x (micro nodes); zero on Lambda by convention.

    ``values[c, j]`` is the value at micro node ``node_ids[j]`` (ids in the
    micro grid) of cell ``emesh.tiling.cells[c]``.  For ``part == "Gamma"``
    the columns are the interface nodes of the cell.
    """

    emesh: object
    micro: SubMesh
    part: str
    node_ids: np.ndarray
    values: np.ndarray

    @property
    def eps(self):
        return self.emesh.tiling.eps

    @property
    def cell_volume(self):
        return math.prod(self.emesh.tiling.cell.periods)

    def micro_values(self):
        """Values laid out on the micro mesh's local node numbering."""
        if self.part == "Gamma":
            raise ValueError("interface field has no volume layout")
        return self.values

    def at_qp(self):
        """Values at micro quadrature points, shape (cells, micro elements, 4)."""
        return self.values[:, self.micro.elements] @ N_QP.T

    def gradient_at_qp(self):
        """Micro gradients at quadrature points, shape (cells, elements, 4, 2)."""
        return np.einsum("qdi,cei->ceqd", self.micro.grad_operator(), self.values[:, self.micro.elements])

    def with_values(self, values):
        return UnfoldedField(self.emesh, self.micro, self.part, self.node_ids, np.asarray(values, dtype=float))

    def to_csv(self, path):
        cells = self.emesh.tiling.cells
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k1", "k2", "node", "value"])
            for c, k in enumerate(cells):
                for j, node in enumerate(self.node_ids):
                    w.writerow([int(k[0]), int(k[1]), int(node), repr(float(self.values[c, j]))])


def _source(phi, mesh):
    if isinstance(phi, GridFunction):
        return phi.mesh, phi.values
    if mesh is None:
        raise TypeError("pass a GridFunction or a (values, mesh) pair")
    return mesh, np.asarray(phi, dtype=float)


def _gather(emesh, source_mesh, micro_ids, micro_grid):
    cells = emesh.tiling.cells
    i, j = micro_grid.node_ij(micro_ids)
    ij = np.stack([i, j], axis=-1)
    glob = np.stack([emesh.cell_node_ids(k, ij) for k in cells]) if len(cells) else np.zeros((0, len(micro_ids)), int)
    local = source_mesh.node_index[glob]
    if (local < 0).any():
        raise ValueError("source mesh does not cover the requested micro domain; non-conforming mesh")
    return local


def unfold(phi, emesh, part="Y", mesh=None):
    """Unfold a nodal field on a component of ``emesh`` onto ``cells x Y_part``."""
    if part not in PARTS:
        raise ValueError(f"part must be one of {PARTS}")
    src_mesh, values = _source(phi, mesh)
    if src_mesh.grid is not emesh.grid:
        raise ValueError("field does not live on this eps-mesh; non-conforming mesh")
    micro = micro_mesh(emesh.tiling.cell, emesh.m, part)
    local = _gather(emesh, src_mesh, micro.nodes, micro.grid)
    return UnfoldedField(emesh, micro, part, micro.nodes, values[local])


def unfold_boundary(phi, emesh, mesh=None):
    """Unfold a trace given at the interface nodes of a component mesh onto cells x Gamma."""
    src_mesh, values = _source(phi, mesh)
    micro = micro_mesh(emesh.tiling.cell, emesh.m, "Y1")
    ids = micro.interface.node_set()
    local = _gather(emesh, src_mesh, ids, micro.grid)
    return UnfoldedField(emesh, micro, "Gamma", ids, values[local])


def _cell_weight(field):
    return field.eps ** field.emesh.tiling.dim * field.cell_volume


def integrate_unfolded(field):
    """``(1/|Y|) * integral over Omega x Y_part`` of the unfolded field."""
    if field.part == "Gamma":
        raise ValueError("use boundary_l2_norm for interface fields")
    return float((field.at_qp() * field.micro.qp_weight).sum() * _cell_weight(field) / field.cell_volume)


def l2_norm(field):
    """L2(Omega x Y_part) norm of the unfolded field."""
    if field.part == "Gamma":
        return boundary_l2_norm(field)
    q = field.at_qp()
    return math.sqrt(float((q * q).sum() * field.micro.qp_weight * _cell_weight(field)))


def boundary_l2_norm(field):
    edges = field.micro.interface
    pos = {int(n): j for j, n in enumerate(field.node_ids)}
    ia = np.array([pos[int(n)] for n in edges.a])
    ib = np.array([pos[int(n)] for n in edges.b])
    _, w = edges.quadrature_points()
    total = 0.0
    for row in field.values:
        q = edges.values_at_qp(row[ia], row[ib])
        total += float((q * q * w).sum())
    return math.sqrt(total * _cell_weight(field))


def paved_interface_edges(emesh):
    """Fine-mesh interface edges lying in paved cells (the set hat Gamma_eps)."""
    mesh = emesh.inclusions if emesh.inclusions is not None else emesh.matrix
    edges = mesh.interface
    tiling = emesh.tiling
    mid = 0.5 * (emesh.grid.node_coords(edges.a) + emesh.grid.node_coords(edges.b))
    k = np.floor(mid / np.asarray(tiling.cell_size)).astype(int)
    paved = {tuple(c) for c in tiling.cells}
    keep = np.array([tuple(v) in paved for v in k], dtype=bool) if len(k) else np.zeros(0, bool)
    return Edges(edges.grid, edges.a[keep], edges.b[keep], edges.axis[keep])


def physical_interface_l2(phi, emesh, mesh=None, paved_only=True):
    """||phi||_{L2(hat Gamma_eps)} by direct edge quadrature on the fine mesh."""
    src_mesh, values = _source(phi, mesh)
    edges = paved_interface_edges(emesh) if paved_only else src_mesh.interface
    if len(edges) == 0:
        return 0.0
    q = edges.values_at_qp(values[src_mesh.node_index[edges.a]], values[src_mesh.node_index[edges.b]])
    _, w = edges.quadrature_points()
    return math.sqrt(float((q * q * w).sum()))


def product_identity_check(phi, psi, emesh, part="Y", mesh=None):
    """max |T(phi*psi) - T(phi)*T(psi)| over all unfolded nodes."""
    m1, v1 = _source(phi, mesh)
    m2, v2 = _source(psi, mesh)
    if m1 is not m2:
        raise ValueError("both factors must live on the same mesh")
    lhs = unfold(v1 * v2, emesh, part, mesh=m1)
    rhs = unfold(v1, emesh, part, mesh=m1).values * unfold(v2, emesh, part, mesh=m1).values
    return float(np.abs(lhs.values - rhs).max()) if lhs.values.size else 0.0


def unfold_gradient_check(phi, emesh, part="Y", mesh=None):
    """max |grad_y T(phi) - eps * T(grad phi)| at micro quadrature points."""
    src_mesh, values = _source(phi, mesh)
    field = unfold(values, emesh, part, mesh=src_mesh)
    left = field.gradient_at_qp()
    grad = src_mesh.gradients_at_qp(values)
    micro = field.micro
    cells = emesh.tiling.cells
    elem = np.empty((len(cells), micro.n_elements), dtype=np.int64)
    for c, k in enumerate(cells):
        a0, b0 = emesh.cell_element_ids(k)
        elem[c] = src_mesh.element_index[a0 + micro.element_ij[:, 0], b0 + micro.element_ij[:, 1]]
    if (elem < 0).any():
        raise ValueError("source mesh does not cover the micro domain")
    right = emesh.tiling.eps * grad[elem]
    return float(np.abs(left - right).max()) if left.size else 0.0


def unfolded_gradient(phi, emesh, part="Y", mesh=None):
    """T(grad phi) at micro quadrature points, shape (cells, elements, 4, 2)."""
    field = unfold(phi, emesh, part, mesh=mesh)
    return field.gradient_at_qp() / emesh.tiling.eps


def restrict_part(field, part):
    """Restrict a Y-field to Y1 or Y2 (the parts reassemble the Y-field)."""
    micro = micro_mesh(field.emesh.tiling.cell, field.emesh.m, part)
    pos = field.micro.node_index[micro.nodes]
    return UnfoldedField(field.emesh, micro, part, micro.nodes, field.values[:, pos])


# ---------------------------------------------------------------------------
# two-scale quadrature: x-Gauss points per cell times micro quadrature in y


def cell_gauss_points(emesh, order=3):
    """Gauss points in x per paved cell: points (cells, order^2, 2), weights (order^2,)."""
    g, w = np.polynomial.legendre.leggauss(order)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    size = np.asarray(emesh.tiling.cell_size)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    ref = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    weights = np.outer(w, w).ravel() * float(np.prod(size))
    origins = emesh.tiling.cells * size
    return origins[:, None, :] + ref[None, :, :] * size, weights


def two_scale_l2(field_qp, micro, emesh, target, order=3):
    """L2(Omega x Y_part) distance between an unfolded quantity and a two-scale target.

    ``field_qp`` has shape (cells, elements, 4[, d]) on the micro quadrature
    points; ``target(x, y)`` receives x of shape (cells, Qx, 1, 1, 2) and y of
    shape (1, 1, elements, 4, 2) and must broadcast to
    (cells, Qx, elements, 4[, d]).  Lambda is not included.
    """
    xq, wx = cell_gauss_points(emesh, order)
    yq = micro.quadrature_points()
    x = xq[:, :, None, None, :]
    y = yq[None, None, :, :, :]
    tv = np.asarray(target(x, y), dtype=float)
    diff = field_qp[:, None] - tv
    sq = diff * diff
    if sq.ndim == 5:
        sq = sq.sum(axis=-1)
    sq = np.broadcast_to(sq, (len(xq), len(wx), micro.n_elements, 4))
    total = float(np.einsum("cxeq,x->", sq, wx)) * micro.qp_weight
    return math.sqrt(total)


def lambda_l2_sq(emesh, func):
    """Integral of func(x)^2 over Lambda_eps (fine elements outside the paving), times |Y|."""
    full = emesh.full
    a = full.element_ij
    size = np.asarray(emesh.tiling.cell_size)
    centers = np.asarray(full.grid.origin) + (a + 0.5) * np.asarray(full.grid.spacing)
    k = np.floor(centers / size).astype(int)
    paved = {tuple(c) for c in emesh.tiling.cells}
    outside = np.array([tuple(v) not in paved for v in k], dtype=bool)
    if not outside.any():
        return 0.0
    x = full.quadrature_points()[outside]
    v = np.asarray(func(x), dtype=float)
    return float((v * v).sum() * full.qp_weight) * math.prod(emesh.tiling.cell.periods)


def unfolding_error(phi_func, emesh, part="Y", order=3):
    """||T(I_h phi) - phi||_{L2(Omega x Y_part)} for a callable ``phi(x)``.

    ``I_h phi`` is the nodal interpolant on the fine mesh; on Lambda the
    unfolded field is zero so the error there is ``|Y|^(1/2) ||phi||``.
    """
    values = emesh.full.interpolate(phi_func)
    field = unfold(values, emesh, part, mesh=emesh.full)
    d = two_scale_l2(field.at_qp(), field.micro, emesh, lambda x, y: phi_func(x[..., :]), order)
    return math.sqrt(d * d + lambda_l2_sq(emesh, phi_func))


def paved_element_mask(emesh, mesh, part="Y"):
    """Elements of ``mesh`` lying in a paved cell and in the micro part ``part``."""
    ij = mesh.element_ij - np.asarray(emesh.offset)
    m = np.asarray(emesh.m)
    k = np.floor_divide(ij, m)
    local = ij - k * m
    paved = np.zeros(len(ij), dtype=bool)
    lookup = emesh.tiling.cell_lookup()
    for e, kk in enumerate(map(tuple, k.tolist())):
        paved[e] = kk in lookup
    if part == "Y":
        return paved
    masks = cell_masks(emesh.tiling.cell, emesh.m)
    return paved & masks[part][local[:, 0], local[:, 1]]


def physical_integral(phi, emesh, part="Y", mesh=None):
    """Direct fine-mesh quadrature of ``phi`` over the paved part hat Omega_part."""
    src_mesh, values = _source(phi, mesh)
    keep = paved_element_mask(emesh, src_mesh, part)
    return float((src_mesh.values_at_qp(values)[keep]).sum() * src_mesh.qp_weight)
