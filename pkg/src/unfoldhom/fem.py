"""Bilinear (Q1) finite elements on structured rectangular grids.

A :class:`Grid` is the full tensor-product grid; a :class:`SubMesh` selects
the elements of one component (matrix, inclusions, whole box).  Nodes on the
interface between two components appear in both sub-meshes, one copy each,
which is how the duplicated interface unknowns of the two-component problem
are represented.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr import parse_expression

# 2-point Gauss rule on [0, 1]
_G = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
GAUSS_1D = _G
GAUSS_1D_WEIGHTS = np.array([0.5, 0.5])
# quadrature points (xi, eta) in element reference order, weights sum to 1
QP = np.array([(_G[0], _G[0]), (_G[1], _G[0]), (_G[1], _G[1]), (_G[0], _G[1])])
QW = np.full(4, 0.25)


def _shape(xi, eta):
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=-1)


def _shape_grad(xi, eta):
    """Reference gradients, shape (..., 2, 4)."""
    dxi = np.stack([-(1 - eta), (1 - eta), eta, -eta], axis=-1)
    deta = np.stack([-(1 - xi), -xi, xi, (1 - xi)], axis=-1)
    return np.stack([dxi, deta], axis=-2)


N_QP = _shape(QP[:, 0], QP[:, 1])  # (4 qp, 4 nodes)
DN_QP = _shape_grad(QP[:, 0], QP[:, 1])  # (4 qp, 2, 4 nodes)


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class NotSPDError(SolverError):
    pass


class SingularSystemError(SolverError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform grid of ``shape = (nx, ny)`` elements starting at ``origin``."""

    origin: tuple
    spacing: tuple
    shape: tuple

    @property
    def n_nodes(self):
        return (self.shape[0] + 1) * (self.shape[1] + 1)

    @property
    def n_elements(self):
        return self.shape[0] * self.shape[1]

    def node_id(self, i, j):
        return np.asarray(i) + (self.shape[0] + 1) * np.asarray(j)

    def node_ij(self, ids):
        ids = np.asarray(ids)
        return ids % (self.shape[0] + 1), ids // (self.shape[0] + 1)

    def node_coords(self, ids=None):
        if ids is None:
            ids = np.arange(self.n_nodes)
        i, j = self.node_ij(ids)
        return np.stack([self.origin[0] + i * self.spacing[0], self.origin[1] + j * self.spacing[1]], axis=-1)

    def element_nodes(self, a, b):
        """Global node ids of element (a, b) in reference order, shape (..., 4)."""
        a = np.asarray(a)
        b = np.asarray(b)
        return np.stack(
            [self.node_id(a, b), self.node_id(a + 1, b), self.node_id(a + 1, b + 1), self.node_id(a, b + 1)], axis=-1
        )

    def locate_elements(self, points):
        """Element indices (a, b) and local coordinates of points, clamped to the grid."""
        pts = np.asarray(points, dtype=float)
        out_ab, out_xi = [], []
        for d in range(2):
            q = (pts[..., d] - self.origin[d]) / self.spacing[d]
            a = np.clip(np.floor(q).astype(np.int64), 0, self.shape[d] - 1)
            out_ab.append(a)
            out_xi.append(q - a)
        return out_ab, out_xi

    def interpolate(self, full_values, points):
        """Evaluate the Q1 field with full-grid nodal values at ``points``."""
        (a, b), (xi, eta) = self.locate_elements(points)
        v = np.asarray(full_values)[self.element_nodes(a, b)]
        return (v * _shape(xi, eta)).sum(axis=-1)

    def interpolate_gradient(self, full_values, points):
        (a, b), (xi, eta) = self.locate_elements(points)
        v = np.asarray(full_values)[self.element_nodes(a, b)]
        dn = _shape_grad(xi, eta) / np.array(self.spacing)[:, None]
        return np.einsum("...di,...i->...d", dn, v)

    def element_centers(self):
        a, b = np.meshgrid(np.arange(self.shape[0]), np.arange(self.shape[1]), indexing="ij")
        cx = self.origin[0] + (a + 0.5) * self.spacing[0]
        cy = self.origin[1] + (b + 0.5) * self.spacing[1]
        return np.stack([cx, cy], axis=-1)


@dataclass(eq=False)
class SubMesh:
    """The elements of ``grid`` selected by ``mask`` (shape ``grid.shape``)."""

    grid: Grid
    mask: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != tuple(self.grid.shape):
            raise ValueError("element mask does not match grid shape")
        a, b = np.nonzero(self.mask)
        order = np.lexsort((a, b))  # row-major in b, then a
        self.element_ij = np.stack([a[order], b[order]], axis=-1)
        glob = self.grid.element_nodes(self.element_ij[:, 0], self.element_ij[:, 1])
        self.nodes = np.unique(glob)
        self.node_index = np.full(self.grid.n_nodes, -1, dtype=np.int64)
        self.node_index[self.nodes] = np.arange(len(self.nodes))
        self.elements = self.node_index[glob]
        self.element_index = np.full(self.grid.shape, -1, dtype=np.int64)
        self.element_index[self.element_ij[:, 0], self.element_ij[:, 1]] = np.arange(len(self.element_ij))

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def element_area(self):
        return self.grid.spacing[0] * self.grid.spacing[1]

    @cached_property
    def coords(self):
        return self.grid.node_coords(self.nodes)

    @property
    def measure(self):
        return self.n_elements * self.element_area

    def quadrature_points(self):
        """Physical quadrature points, shape (n_elements, 4, 2)."""
        hx, hy = self.grid.spacing
        x0 = self.grid.origin[0] + self.element_ij[:, 0] * hx
        y0 = self.grid.origin[1] + self.element_ij[:, 1] * hy
        px = x0[:, None] + QP[None, :, 0] * hx
        py = y0[:, None] + QP[None, :, 1] * hy
        return np.stack([px, py], axis=-1)

    @property
    def qp_weight(self):
        return self.element_area * QW[0]

    def grad_operator(self):
        """Physical basis gradients at quadrature points, shape (4 qp, 2, 4)."""
        hx, hy = self.grid.spacing
        return DN_QP / np.array([hx, hy])[None, :, None]

    def values_at_qp(self, values):
        return np.asarray(values)[self.elements] @ N_QP.T

    def gradients_at_qp(self, values):
        """Shape (n_elements, 4 qp, 2)."""
        ue = np.asarray(values)[self.elements]
        return np.einsum("qdi,ei->eqd", self.grad_operator(), ue)

    def boundary_nodes(self):
        """Local ids of mesh nodes on the outer boundary of the grid."""
        i, j = self.grid.node_ij(self.nodes)
        nx, ny = self.grid.shape
        on = (i == 0) | (i == nx) | (j == 0) | (j == ny)
        return np.nonzero(on)[0]

    @cached_property
    def interface(self):
        """Edges separating active from inactive elements inside the grid."""
        return interface_edges(self.grid, self.mask)

    def restrict(self, full_values):
        """Pick this mesh's nodes out of a full-grid nodal vector."""
        return np.asarray(full_values)[self.nodes]

    def prolong(self, values, fill=0.0):
        out = np.full(self.grid.n_nodes, fill, dtype=float)
        out[self.nodes] = values
        return out

    def interpolate(self, func):
        return np.asarray(func(self.coords), dtype=float)


@dataclass(frozen=True, eq=False)
class Edges:
    """Interface edges as global node pairs; ``axis`` is the edge direction."""

    grid: Grid
    a: np.ndarray
    b: np.ndarray
    axis: np.ndarray

    def __len__(self):
        return len(self.a)

    @property
    def lengths(self):
        return np.where(self.axis == 0, self.grid.spacing[0], self.grid.spacing[1])

    @property
    def total_length(self):
        return float(self.lengths.sum()) if len(self) else 0.0

    def quadrature_points(self):
        """Gauss points, shape (n_edges, 2, 2), and weights, shape (n_edges, 2)."""
        pa = self.grid.node_coords(self.a)
        pb = self.grid.node_coords(self.b)
        pts = pa[:, None, :] + GAUSS_1D[None, :, None] * (pb - pa)[:, None, :]
        w = self.lengths[:, None] * GAUSS_1D_WEIGHTS[None, :]
        return pts, w

    def values_at_qp(self, va, vb):
        """Linear interpolation along edges of endpoint values."""
        va = np.asarray(va)
        vb = np.asarray(vb)
        return va[:, None] * (1 - GAUSS_1D)[None, :] + vb[:, None] * GAUSS_1D[None, :]

    def node_set(self):
        return np.unique(np.concatenate([self.a, self.b]))


def interface_edges(grid, mask):
    mask = np.asarray(mask, dtype=bool)
    nx, ny = grid.shape
    a_list, b_list, axis_list = [], [], []
    # vertical edges at node column i between elements (i-1, b) and (i, b)
    diff = mask[1:, :] != mask[:-1, :]
    i, b = np.nonzero(diff)
    i = i + 1
    a_list.append(grid.node_id(i, b))
    b_list.append(grid.node_id(i, b + 1))
    axis_list.append(np.ones(len(i), dtype=int))
    diff = mask[:, 1:] != mask[:, :-1]
    a, j = np.nonzero(diff)
    j = j + 1
    a_list.append(grid.node_id(a, j))
    b_list.append(grid.node_id(a + 1, j))
    axis_list.append(np.zeros(len(a), dtype=int))
    ea = np.concatenate(a_list)
    eb = np.concatenate(b_list)
    ax = np.concatenate(axis_list)
    order = np.lexsort((eb, ea))
    return Edges(grid, ea[order], eb[order], ax[order])


@dataclass(frozen=True)
class GridFunction:
    """Nodal values on one component mesh."""

    mesh: SubMesh
    values: np.ndarray
    component: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.mesh.n_nodes,):
            raise ValueError(f"expected {self.mesh.n_nodes} nodal values, got shape {values.shape}")
        object.__setattr__(self, "values", values)


# ---------------------------------------------------------------------------
# meshes for the reference cell and the eps-paving


def _cells_per_axis(fraction, m, what):
    v = fraction * m
    r = round(v)
    if abs(v - r) > 1e-9:
        raise ValueError(f"{what}: fraction {fraction} is not a multiple of 1/{m}; mesh cannot conform")
    return int(r)


def _resolution(cell, m):
    m = (int(m),) * cell.dim if np.isscalar(m) else tuple(int(v) for v in m)
    if any(v < 1 for v in m):
        raise ValueError("micro resolution must be positive")
    return m


def inclusion_element_range(cell, m):
    """Per-axis half-open micro-element index ranges covered by the inclusion."""
    m = _resolution(cell, m)
    if cell.inclusion is None:
        return None
    return [(_cells_per_axis(lo, m[d], "inclusion"), _cells_per_axis(hi, m[d], "inclusion"))
            for d, (lo, hi) in enumerate(cell.inclusion)]


def cell_grid(cell, m):
    m = _resolution(cell, m)
    return Grid((0.0, 0.0), tuple(p / md for p, md in zip(cell.periods, m)), m)


def cell_masks(cell, m):
    """Element masks {"Y", "Y1", "Y2"} on the micro grid."""
    m = _resolution(cell, m)
    full = np.ones(m, dtype=bool)
    inc = np.zeros(m, dtype=bool)
    rng = inclusion_element_range(cell, m)
    if rng is not None:
        inc[rng[0][0]:rng[0][1], rng[1][0]:rng[1][1]] = True
    return {"Y": full, "Y1": full & ~inc, "Y2": inc}


def cell_mesh(cell, m, part="Y"):
    grid = cell_grid(cell, m)
    mask = cell_masks(cell, m)[part]
    if not mask.any():
        raise ValueError(f"cell part {part} is empty")
    return SubMesh(grid, mask, part)


@dataclass(eq=False)
class EpsilonMesh:
    """Conforming fine mesh of the domain for one tiling and micro resolution."""

    tiling: object
    m: tuple
    grid: Grid
    offset: tuple  # grid index of the lattice origin
    inclusion_mask: np.ndarray
    full: SubMesh
    matrix: SubMesh
    inclusions: SubMesh | None

    def cell_node_ids(self, k, micro_nodes_ij):
        """Global grid node ids of micro nodes (i, j) in cell k."""
        i = self.offset[0] + k[0] * self.m[0] + micro_nodes_ij[..., 0]
        j = self.offset[1] + k[1] * self.m[1] + micro_nodes_ij[..., 1]
        return self.grid.node_id(i, j)

    def cell_element_ids(self, k):
        """(a, b) grid element indices of all micro elements of cell k."""
        return self.offset[0] + k[0] * self.m[0], self.offset[1] + k[1] * self.m[1]


def epsilon_mesh(tiling, m, boundary_inclusions=True):
    """Fine grid with spacing ``eps*l/m`` conforming to every cell and inclusion.

    ``boundary_inclusions`` keeps inclusions of K \\ K-hat (cells only partly
    inside the domain); set it False to keep only the paved cells' inclusions.
    """
    cell = tiling.cell
    m = _resolution(cell, m)
    h = tuple(tiling.eps * p / md for p, md in zip(cell.periods, m))
    offset = []
    shape = []
    for d in range(2):
        lo_idx = tiling.domain.low[d] / h[d]
        hi_idx = tiling.domain.high[d] / h[d]
        if abs(lo_idx - round(lo_idx)) > 1e-8 or abs(hi_idx - round(hi_idx)) > 1e-8:
            raise ValueError(f"domain side {d} is not a multiple of the mesh spacing {h[d]}; non-conforming")
        offset.append(-int(round(lo_idx)))
        shape.append(int(round(hi_idx)) - int(round(lo_idx)))
    grid = Grid(tuple(tiling.domain.low), h, tuple(shape))
    inc = np.zeros(shape, dtype=bool)
    rng = inclusion_element_range(cell, m)
    if rng is not None:
        keys = tiling.inclusions if boundary_inclusions else tiling.cells
        allowed = {tuple(k) for k in tiling.inclusions}
        for k in keys:
            if tuple(k) not in allowed:
                continue
            a0 = offset[0] + k[0] * m[0]
            b0 = offset[1] + k[1] * m[1]
            inc[a0 + rng[0][0]:a0 + rng[0][1], b0 + rng[1][0]:b0 + rng[1][1]] = True
    full = SubMesh(grid, np.ones(shape, dtype=bool), "Omega")
    matrix = SubMesh(grid, ~inc, "Omega1")
    inclusions = SubMesh(grid, inc, "Omega2") if inc.any() else None
    return EpsilonMesh(tiling, m, grid, tuple(offset), inc, full, matrix, inclusions)


# ---------------------------------------------------------------------------
# coefficients


@dataclass
class CoefficientModel:
    """Matrix field A(y, t), interface conductance h(y) and declared bounds.

    Each entry is an expression over ``y1, y2, t``; ``h`` is over ``y1, y2``.
    Cell coordinates are reduced modulo ``periods`` before evaluation so the
    model is exactly Y-periodic.
    """

    a11: str = "1"
    a12: str = "0"
    a21: str = "0"
    a22: str = "1"
    h: str = "1"
    alpha: float = 1.0
    periods: tuple = (1.0, 1.0)
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        self._entries = [parse_expression(s) for s in (self.a11, self.a12, self.a21, self.a22)]
        self._h = parse_expression(self.h, variables=("y1", "y2"))

    @property
    def depends_on_t(self):
        return any(e.depends_on("t") for e in self._entries)

    @property
    def is_symmetric_form(self):
        return self.a12.replace(" ", "") == self.a21.replace(" ", "")

    def reduce(self, y):
        y = np.asarray(y, dtype=float)
        return np.mod(y, np.asarray(self.periods))

    def matrix(self, y, t):
        """A at cell points ``y`` (last axis 2) and states ``t``; shape (..., 2, 2)."""
        y = self.reduce(y)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast_shapes(y.shape[:-1], t.shape)
        env = {"y1": y[..., 0], "y2": y[..., 1], "t": t}
        try:
            vals = [e.evaluate(shape, **env) for e in self._entries]
        except (ZeroDivisionError, FloatingPointError) as exc:
            raise ValueError(f"coefficient evaluation failed: {exc}") from exc
        out = np.empty(shape + (2, 2))
        out[..., 0, 0], out[..., 0, 1], out[..., 1, 0], out[..., 1, 1] = vals
        return out

    def conductance(self, y):
        y = self.reduce(y)
        return self._h.evaluate(y.shape[:-1], y1=y[..., 0], y2=y[..., 1])

    def scaled(self, c):
        """The model with A replaced by c*A (h unchanged)."""
        wrap = lambda s: f"({c!r})*({s})"
        return CoefficientModel(wrap(self.a11), wrap(self.a12), wrap(self.a21), wrap(self.a22), self.h,
                                self.alpha * c, self.periods, dict(self.bounds))

    def sample_coercivity(self, t_values, n=17):
        """Smallest eigenvalue of sym(A) over an n x n cell grid and ``t_values``."""
        s = (np.arange(n) + 0.5) / n
        y = np.stack(np.meshgrid(s * self.periods[0], s * self.periods[1], indexing="ij"), axis=-1).reshape(-1, 2)
        t = np.asarray(t_values, dtype=float)
        a = self.matrix(y[:, None, :], t[None, :])
        sym = 0.5 * (a + np.swapaxes(a, -1, -2))
        return float(np.linalg.eigvalsh(sym)[..., 0].min())

    def check_coercive(self, t_values, tol=1e-12):
        lam = self.sample_coercivity(t_values)
        if lam < self.alpha - tol:
            raise ValueError(f"sampled coercivity {lam:.6g} below declared alpha {self.alpha:.6g}")
        return lam

    def sample_bound(self, t_values, n=17):
        """Largest spectral norm of A over the sample grid (empirical M_r)."""
        s = (np.arange(n) + 0.5) / n
        y = np.stack(np.meshgrid(s * self.periods[0], s * self.periods[1], indexing="ij"), axis=-1).reshape(-1, 2)
        a = self.matrix(y[:, None, :], np.asarray(t_values, dtype=float)[None, :])
        return float(np.linalg.norm(a, ord=2, axis=(-2, -1)).max())

    def min_conductance(self, edges, eps=None):
        if len(edges) == 0:
            return math.inf
        pts, _ = edges.quadrature_points()
        y = pts if eps is None else pts / eps
        return float(self.conductance(y).min())


# ---------------------------------------------------------------------------
# assembly


def _coo_to_csr(rows, cols, data, n):
    return sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def coefficient_at_qp(mesh, coeff, state=None, eps=None, t=None):
    x = mesh.quadrature_points()
    y = x if eps is None else x / eps
    if state is not None:
        tq = mesh.values_at_qp(state)
    else:
        tq = np.full(x.shape[:-1], 0.0 if t is None else float(t))
    return coeff.matrix(y, tq)


def element_matrices(mesh, amat):
    """Element stiffness blocks from A at quadrature points, shape (ne, 4, 4)."""
    g = mesh.grad_operator()
    return np.einsum("qai,eqab,qbj->eij", g, amat, g) * mesh.qp_weight


def assemble_stiffness(mesh, coeff, state=None, eps=None, t=None):
    """Sparse matrix of ``int A(y, state) grad(phi_j) . grad(phi_i)``.

    The cell variable is ``x/eps`` when ``eps`` is given and ``x`` otherwise.
    ``state`` holds nodal values of the frozen quasilinear argument; without it
    the constant ``t`` (default 0) is used.
    """
    try:
        amat = coefficient_at_qp(mesh, coeff, state, eps, t)
    except ValueError as exc:
        bad = _first_bad_element(mesh, coeff, state, eps, t)
        raise ValueError(f"{exc} (element {bad})") from exc
    return assemble_tensor_field(mesh, amat)


def assemble_tensor_field(mesh, amat):
    """Stiffness matrix for a tensor given directly at quadrature points (ne, 4, 2, 2)."""
    ke = element_matrices(mesh, amat)
    rows = np.broadcast_to(mesh.elements[:, :, None], ke.shape)
    cols = np.broadcast_to(mesh.elements[:, None, :], ke.shape)
    return _coo_to_csr(rows, cols, ke, mesh.n_nodes)


def _first_bad_element(mesh, coeff, state, eps, t):
    x = mesh.quadrature_points()
    y = x if eps is None else x / eps
    tq = mesh.values_at_qp(state) if state is not None else np.full(x.shape[:-1], 0.0 if t is None else float(t))
    for e in range(mesh.n_elements):
        try:
            coeff.matrix(y[e], tq[e])
        except ValueError:
            return e
    return None


def assemble_load(mesh, f, eps=None):
    """Load vector ``int f phi_i`` for a callable ``f(x)`` on points (..., 2)."""
    x = mesh.quadrature_points()
    fq = np.broadcast_to(np.asarray(f(x), dtype=float), x.shape[:-1])
    fe = (fq @ N_QP) * mesh.qp_weight  # (ne, 4)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.elements, fe)
    return out


def assemble_mass(mesh):
    ne = mesh.n_elements
    me = np.einsum("qi,qj->ij", N_QP, N_QP) * mesh.qp_weight
    me = np.broadcast_to(me, (ne, 4, 4))
    rows = np.broadcast_to(mesh.elements[:, :, None], me.shape)
    cols = np.broadcast_to(mesh.elements[:, None, :], me.shape)
    return _coo_to_csr(rows, cols, me, mesh.n_nodes)


def edge_mass_blocks(edges, weight=None):
    """Per-edge 2x2 mass matrices ``int w phi_a phi_b ds``, shape (n_edges, 2, 2)."""
    pts, w = edges.quadrature_points()
    if weight is not None:
        w = w * weight
    phi = np.stack([1 - GAUSS_1D, GAUSS_1D], axis=-1)  # (2 qp, 2 basis)
    return np.einsum("eq,qi,qj->eij", w, phi, phi)


def assemble_interface_coupling(mesh1, mesh2, edges, coeff, eps, gamma=1.0):
    """Matrix of ``eps^gamma int h(x/eps) (u1 - u2)(v1 - v2)`` on the interface.

    Unknowns are ordered ``[mesh1 nodes, mesh2 nodes]``; interface nodes carry
    one copy in each mesh, paired through their common grid node id.
    """
    n1, n2 = mesh1.n_nodes, mesh2.n_nodes
    if len(edges) == 0:
        return sp.csr_matrix((n1 + n2, n1 + n2))
    ia1, ib1 = mesh1.node_index[edges.a], mesh1.node_index[edges.b]
    ia2, ib2 = mesh2.node_index[edges.a], mesh2.node_index[edges.b]
    if (ia1 < 0).any() or (ib1 < 0).any() or (ia2 < 0).any() or (ib2 < 0).any():
        raise ValueError("interface edge node missing from one component: mismatched pairing")
    pts, _ = edges.quadrature_points()
    hq = coeff.conductance(pts / eps)
    me = edge_mass_blocks(edges, hq) * eps ** gamma
    dofs = np.stack([ia1, ib1, ia2 + n1, ib2 + n1], axis=-1)
    sign = np.array([1.0, 1.0, -1.0, -1.0])
    block = np.zeros((len(edges), 4, 4))
    for r in range(4):
        for c in range(4):
            block[:, r, c] = sign[r] * sign[c] * me[:, r % 2, c % 2]
    rows = np.broadcast_to(dofs[:, :, None], block.shape)
    cols = np.broadcast_to(dofs[:, None, :], block.shape)
    return _coo_to_csr(rows, cols, block, n1 + n2)


# ---------------------------------------------------------------------------
# integrals


def integrate(mesh, values):
    return float((mesh.values_at_qp(values) * mesh.qp_weight).sum())


def integrate_edges(edges, mesh, values, weight=None):
    va = np.asarray(values)[mesh.node_index[edges.a]]
    vb = np.asarray(values)[mesh.node_index[edges.b]]
    q = edges.values_at_qp(va, vb)
    _, w = edges.quadrature_points()
    if weight is not None:
        w = w * weight
    return float((q * w).sum())


def mean_value(u, region="volume", element_mask=None):
    """Average of a :class:`GridFunction` over its mesh or its interface edges.

    ``element_mask`` (over the mesh's elements) restricts a volume mean to a
    subset such as the copy of the cell inside one tile.
    """
    mesh = u.mesh
    if region == "volume":
        vals = mesh.values_at_qp(u.values)
        if element_mask is not None:
            vals = vals[np.asarray(element_mask, dtype=bool)]
        if vals.size == 0:
            raise ValueError("mean over an empty region")
        return float(vals.mean())
    if region == "interface":
        edges = mesh.interface
        if len(edges) == 0:
            raise ValueError("mean over an empty interface")
        return integrate_edges(edges, mesh, u.values) / edges.total_length
    raise ValueError(f"unknown region {region!r}")


def l2_norm(mesh, values):
    v = mesh.values_at_qp(values)
    return math.sqrt(float((v * v).sum() * mesh.qp_weight))


def grad_norm(mesh, values):
    g = mesh.gradients_at_qp(values)
    return math.sqrt(float((g * g).sum() * mesh.qp_weight))


# ---------------------------------------------------------------------------
# linear solvers


def _dot(a, b):
    # pairwise summation; avoids thread-count dependent BLAS reductions
    return float(np.add.reduce(a * b))


def solve_spd(matrix, rhs, tol=1e-10, maxit=None, x0=None, history=None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``||b - Ax|| <= tol * ||b||``.  Raises :class:`NotSPDError` on
    non-positive curvature and :class:`ConvergenceError` (carrying the
    residual history) when ``maxit`` is exhausted.
    """
    a = sp.csr_matrix(matrix)
    b = np.asarray(rhs, dtype=float)
    n = len(b)
    if maxit is None:
        maxit = max(10 * n, 100)
    diag = a.diagonal()
    if (diag <= 0).any():
        raise NotSPDError("non-positive diagonal entry; matrix is not SPD")
    inv_d = 1.0 / diag
    hist = [] if history is None else history
    bnorm = math.sqrt(_dot(b, b))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        hist.append(0.0)
        return np.zeros(n)
    r = b - a @ x
    rnorm = math.sqrt(_dot(r, r))
    hist.append(rnorm / bnorm)
    if rnorm <= tol * bnorm:
        return x
    z = inv_d * r
    p = z.copy()
    rz = _dot(r, z)
    for _ in range(maxit):
        ap = a @ p
        curv = _dot(p, ap)
        if curv <= 0:
            raise NotSPDError(f"negative curvature {curv:.3e} encountered in CG")
        step = rz / curv
        x += step * p
        r -= step * ap
        rnorm = math.sqrt(_dot(r, r))
        hist.append(rnorm / bnorm)
        if rnorm <= tol * bnorm:
            return x
        z = inv_d * r
        rz_new = _dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"CG did not converge in {maxit} iterations (residual {hist[-1]:.3e})", hist)


@dataclass
class SparseSystem:
    """Matrix, right-hand side and constraints.

    ``fixed`` maps dof -> prescribed value (eliminated before solving).
    ``mean_row`` is a dense constraint row ``g`` with ``g . x = mean_value``,
    enforced by one Lagrange multiplier; the bordered matrix is symmetric
    indefinite, so it is factorized directly instead of using CG.
    """

    matrix: sp.spmatrix
    rhs: np.ndarray
    fixed: dict = field(default_factory=dict)
    mean_row: np.ndarray | None = None
    mean_value: float = 0.0

    def solve(self, tol=1e-10, maxit=None, x0=None, history=None):
        a = sp.csr_matrix(self.matrix)
        n = a.shape[0]
        x = np.zeros(n)
        fixed_idx = np.array(sorted(self.fixed), dtype=np.int64)
        if len(fixed_idx):
            x[fixed_idx] = [self.fixed[i] for i in fixed_idx]
        free = np.setdiff1d(np.arange(n), fixed_idx)
        b = np.asarray(self.rhs, dtype=float)[free] - (a[free][:, fixed_idx] @ x[fixed_idx] if len(fixed_idx) else 0.0)
        aff = a[free][:, free]
        if self.mean_row is None:
            start = None if x0 is None else np.asarray(x0)[free]
            x[free] = solve_spd(aff, b, tol=tol, maxit=maxit, x0=start, history=history)
            return x
        g = np.asarray(self.mean_row, dtype=float)
        rhs_g = self.mean_value - (g[fixed_idx] @ x[fixed_idx] if len(fixed_idx) else 0.0)
        g = g[free]
        bordered = sp.bmat([[aff, sp.csr_matrix(g[:, None])], [sp.csr_matrix(g[None, :]), None]], format="csc")
        sol = spla.splu(bordered).solve(np.append(b, rhs_g))
        x[free] = sol[:-1]
        res = np.linalg.norm(bordered @ sol - np.append(b, rhs_g))
        scale = max(np.linalg.norm(np.append(b, rhs_g)), 1.0)
        if history is not None:
            history.append(res / scale)
        if not np.isfinite(sol).all() or res > 1e-8 * scale:
            raise SingularSystemError(f"bordered system solve failed (residual {res:.3e})")
        return x
