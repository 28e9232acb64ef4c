"""Reference cell, inclusion geometry and the eps-paving of a box domain."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

_TOL = 1e-12


class TilingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ReferenceCell:
    """The periodicity cell ``Y = [0, l1) x [0, l2)`` with a box inclusion.

    ``inclusion`` holds per-axis ``(low, high)`` fractions of the periods, or
    ``None`` for the degenerate one-component cell used as a test oracle.
    """

    periods: tuple = (1.0, 1.0)
    inclusion: tuple | None = ((0.25, 0.75), (0.25, 0.75))

    def __post_init__(self):
        periods = tuple(float(p) for p in self.periods)
        if any(p <= 0 for p in periods):
            raise ValueError(f"periods must be positive, got {periods}")
        object.__setattr__(self, "periods", periods)
        if self.inclusion is not None:
            inc = tuple((float(lo), float(hi)) for lo, hi in self.inclusion)
            if len(inc) != len(periods):
                raise ValueError("inclusion needs one (low, high) pair per axis")
            for lo, hi in inc:
                # closure(Y2) must sit strictly inside Y
                if not (0.0 < lo < hi < 1.0):
                    raise ValueError(f"inclusion fractions must satisfy 0 < low < high < 1, got {(lo, hi)}")
            object.__setattr__(self, "inclusion", inc)

    @property
    def dim(self):
        return len(self.periods)

    @property
    def has_inclusion(self):
        return self.inclusion is not None

    def inclusion_box(self):
        """Inclusion corners in cell coordinates, shape (dim, 2)."""
        if self.inclusion is None:
            return None
        return np.array([(lo * p, hi * p) for (lo, hi), p in zip(self.inclusion, self.periods)])

    def in_inclusion(self, y):
        """Mask of points (last axis = coordinates) lying in the open inclusion."""
        y = np.asarray(y, dtype=float)
        if self.inclusion is None:
            return np.zeros(y.shape[:-1], dtype=bool)
        box = self.inclusion_box()
        inside = np.ones(y.shape[:-1], dtype=bool)
        for d in range(self.dim):
            inside &= (y[..., d] > box[d, 0]) & (y[..., d] < box[d, 1])
        return inside


@dataclass(frozen=True)
class CellMeasures:
    Y: float
    Y1: float
    Y2: float
    Gamma: float


def cell_measures(cell):
    """Closed-form measures |Y|, |Y1|, |Y2| and |Gamma| (perimeter in 2D)."""
    vol = math.prod(cell.periods)
    if cell.inclusion is None:
        return CellMeasures(vol, vol, 0.0, 0.0)
    sides = [(hi - lo) * p for (lo, hi), p in zip(cell.inclusion, cell.periods)]
    vol2 = math.prod(sides)
    # surface of a box: sum over axes of the product of the other sides, twice
    surface = 2.0 * sum(math.prod(sides[:d] + sides[d + 1:]) for d in range(len(sides)))
    return CellMeasures(vol, vol - vol2, vol2, surface)


@dataclass(frozen=True)
class Box:
    low: tuple
    high: tuple

    def __post_init__(self):
        low = tuple(float(v) for v in self.low)
        high = tuple(float(v) for v in self.high)
        if len(low) != len(high) or any(h <= l for l, h in zip(low, high)):
            raise ValueError(f"degenerate box {low} x {high}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def measure(self):
        return math.prod(h - l for l, h in zip(self.low, self.high))

    @classmethod
    def unit(cls, dim=2):
        return cls((0.0,) * dim, (1.0,) * dim)


@dataclass(frozen=True)
class EpsilonTiling:
    """Index sets of the eps-paving.

    ``cells`` enumerates K-hat (whole cells inside the domain) and
    ``inclusions`` enumerates K (cells whose closed inclusion lies inside the
    open domain). Both are sorted lexicographically.
    """

    cell: ReferenceCell
    domain: Box
    eps: float
    cells: np.ndarray
    inclusions: np.ndarray
    status: str = "ok"
    warnings: tuple = field(default=())

    @property
    def dim(self):
        return self.cell.dim

    @property
    def cell_size(self):
        return tuple(self.eps * p for p in self.cell.periods)

    @property
    def n_cells(self):
        return len(self.cells)

    def cell_origin(self, k):
        return np.asarray(k, dtype=float) * np.asarray(self.cell_size)

    def cell_lookup(self):
        """Map from cell multi-index tuple to its row in ``cells``."""
        return {tuple(int(v) for v in k): i for i, k in enumerate(self.cells)}

    def is_exact(self):
        """True when the paving covers the domain exactly (Lambda empty)."""
        return self.lambda_measure <= _TOL * max(1.0, self.domain.measure)

    @property
    def paved_measure(self):
        return self.n_cells * self.eps ** self.dim * math.prod(self.cell.periods)

    @property
    def lambda_measure(self):
        return max(self.domain.measure - self.paved_measure, 0.0)

    def component_measures(self):
        """(|Omega_1^eps|, |Omega_2^eps|, |Gamma^eps|)."""
        m = cell_measures(self.cell)
        n_inc = len(self.inclusions) if self.cell.has_inclusion else 0
        omega2 = n_inc * self.eps ** self.dim * m.Y2
        return self.domain.measure - omega2, omega2, n_inc * self.eps ** (self.dim - 1) * m.Gamma

    def hat_component_measures(self):
        """(|hat Omega_1^eps|, |hat Omega_2^eps|)."""
        m = cell_measures(self.cell)
        scale = self.n_cells * self.eps ** self.dim
        return scale * m.Y1, scale * m.Y2


def _axis_range(lo, hi, size, offset_lo, offset_hi, strict):
    """Integers k with lo <= (k + offset_lo)*size and (k + offset_hi)*size <= hi."""
    tol = _TOL * max(1.0, abs(lo), abs(hi))
    kmin = math.floor(lo / size - offset_lo) - 1
    kmax = math.ceil(hi / size - offset_hi) + 1
    out = []
    for k in range(kmin, kmax + 1):
        a = (k + offset_lo) * size
        b = (k + offset_hi) * size
        if strict:
            ok = a > lo + tol and b < hi - tol
        else:
            ok = a >= lo - tol and b <= hi + tol
        if ok:
            out.append(k)
    return out


def build_tiling(cell, domain, eps):
    """Enumerate K-hat and K for ``domain`` paved by ``eps``-scaled cells."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if len(domain.low) != cell.dim:
        raise ValueError("domain and cell dimensions differ")
    axes_hat = []
    axes_inc = []
    for d in range(cell.dim):
        size = eps * cell.periods[d]
        axes_hat.append(_axis_range(domain.low[d], domain.high[d], size, 0.0, 1.0, strict=False))
        if cell.inclusion is not None:
            lo, hi = cell.inclusion[d]
            axes_inc.append(_axis_range(domain.low[d], domain.high[d], size, lo, hi, strict=True))
    cells = np.array(list(itertools.product(*axes_hat)), dtype=int).reshape(-1, cell.dim)
    if cell.inclusion is not None:
        inclusions = np.array(list(itertools.product(*axes_inc)), dtype=int).reshape(-1, cell.dim)
    else:
        inclusions = np.zeros((0, cell.dim), dtype=int)
    status, notes = "ok", ()
    if len(cells) == 0:
        status = "empty"
        notes = (f"eps={eps} cell does not fit in the domain; K-hat is empty",)
        warnings.warn(notes[0], TilingWarning, stacklevel=2)
    return EpsilonTiling(cell, domain, float(eps), cells, inclusions, status, notes)


def _snap_floor(q):
    r = round(q)
    if abs(q - r) <= 8 * np.finfo(float).eps * max(1.0, abs(q)):
        return int(r)
    return math.floor(q)


def locate(x, tiling):
    """Split ``x = eps*k_l + eps*y`` with ``y`` in the half-open cell.

    Points on a cell's lower faces belong to that cell (left-closed); values
    within a few ulps of a lattice plane snap onto it. Returns ``(k, y)`` or
    ``None`` when ``x`` is outside the paved region.
    """
    k = []
    y = []
    for d, xd in enumerate(x):
        size = tiling.eps * tiling.cell.periods[d]
        kd = _snap_floor(xd / size)
        k.append(kd)
        y.append(max(xd / tiling.eps - kd * tiling.cell.periods[d], 0.0))
    k = tuple(k)
    if k not in tiling.cell_lookup():
        return None
    return k, np.array(y)
