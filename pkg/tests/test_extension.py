import math
import warnings

import numpy as np
import pytest

from unfoldhom.extension import (CellExtension, extend_periodic, fit_loglog_slope, flatness, input_family,
                                 measure_ratio)
from unfoldhom.fem import CoefficientModel, assemble_stiffness
from unfoldhom.geometry import ReferenceCell
from unfoldhom.unfolding import restrict_part, unfold

from conftest import BASELINES, emesh_for

LADDER = (0.25, 0.125, 0.0625, 0.03125)


@pytest.fixture(scope="module")
def ops16():
    return CellExtension(ReferenceCell(), 16)


def cell_grad(mesh, values):
    g = np.einsum("qdi,bei->beqd", mesh.grad_operator(), np.atleast_2d(values)[:, mesh.elements])
    return np.sqrt((g * g).sum(axis=(1, 2, 3)) * mesh.qp_weight)


def test_p2_extends_and_vanishes_on_boundary(ops16, rng):
    u = rng.standard_normal((5, ops16.Y2.n_nodes))
    ext = ops16.extend_p2(u)
    assert np.array_equal(ext[:, ops16._pos_y2], u)
    outer = ops16.Y.node_index[ops16.outer_ids]
    assert np.array_equal(ext[:, outer], np.zeros((5, len(outer))))


def test_p2_fill_is_discrete_harmonic(ops16, rng):
    u = rng.standard_normal(ops16.Y2.n_nodes)
    ext = ops16.extend_p2(u)
    k = assemble_stiffness(ops16.Y1, CoefficientModel())
    v = ext[ops16._pos_y1]
    interior = np.setdiff1d(np.arange(ops16.Y1.n_nodes),
                            np.concatenate([ops16.Y1.node_index[ops16.gamma_ids], ops16.Y1.node_index[ops16.outer_ids]]))
    assert np.abs((k @ v)[interior]).max() < 1e-10


def test_p1_extends_exactly(ops16, rng):
    u = rng.standard_normal(ops16.Y1.n_nodes)
    ext = ops16.extend_p1(u)
    assert np.array_equal(ext[ops16._pos_y1], u)


def test_p2_cell_ratio_baseline(ops16):
    rng = np.random.default_rng(2024)
    u = rng.standard_normal((50, ops16.Y2.n_nodes))
    u -= ops16.mean_y2(u)[:, None]
    ratio = cell_grad(ops16.Y, ops16.extend_p2(u)) / cell_grad(ops16.Y2, u)
    assert ratio.max() <= BASELINES["p2_cell_ratio"]["bound"]
    assert ratio.min() >= 1.0 - 1e-12  # the extension contains u itself


def test_p1_cell_ratio_baseline(ops16):
    rng = np.random.default_rng(2024)
    u = rng.standard_normal((50, ops16.Y1.n_nodes))
    ratio = cell_grad(ops16.Y, ops16.extend_p1(u)) / cell_grad(ops16.Y1, u)
    assert ratio.max() <= BASELINES["p1_cell_ratio"]["bound"]


def test_collar_constant_energy():
    ops = CellExtension(ReferenceCell(), 16)
    ext = ops.legacy_extend(np.ones(ops.Y2.n_nodes), 0.125)
    e = float(ops.energy(ext)[0])
    # u = 1 decays to 0 across a collar of width 1/8 around the 1/2 x 1/2 inclusion;
    # the one-dimensional profile gives perimeter / width = 2 / (1/8) = 16 from below
    assert 16.0 < e < 20.0


@pytest.mark.parametrize("eta", [0.01, 0.3, 0.1])
def test_collar_width_validated(eta):
    with pytest.raises(ValueError):
        CellExtension(ReferenceCell(), 16).set_collar(eta)


@pytest.mark.parametrize("variant, part", [("P2", "Y2"), ("P1", "Y1")])
@pytest.mark.parametrize("eps", [0.25, 0.125])
def test_periodic_extension_unfolds_to_component(variant, part, eps, rng):
    em = emesh_for(eps)
    mesh = em.inclusions if part == "Y2" else em.matrix
    u = rng.standard_normal(mesh.n_nodes)
    ext = extend_periodic(u, em, variant)
    lhs = restrict_part(unfold(ext.field, em, "Y"), part).values
    rhs = unfold(u, em, part, mesh=mesh).values
    assert np.array_equal(lhs, rhs)


def test_p2_periodic_extension_is_continuous(rng):
    em = emesh_for(0.125)
    ext = extend_periodic(rng.standard_normal(em.inclusions.n_nodes), em, "P2")
    assert ext.max_jump == 0.0


def test_p2_ratio_flat_over_ladder():
    ems = [emesh_for(e) for e in LADDER]
    rows = measure_ratio("P2", ems, "zero-mean", seed=0)
    assert flatness([r["ratio"] for r in rows]) <= 0.15


def test_p2bar_constant_slope():
    ems = [emesh_for(e) for e in LADDER]
    rows = measure_ratio("P2bar", ems, "constant", seed=0, eta=0.125)
    slope = fit_loglog_slope([r["eps"] for r in rows], [r["ratio"] for r in rows])
    assert -1.2 <= slope <= -0.8


def test_constant_input_is_skipped_for_p2():
    rows = measure_ratio("P2", [emesh_for(0.25)], "constant", seed=0)
    assert rows[0]["status"] == "skipped" and math.isnan(rows[0]["ratio"])


def test_flatness_of_empty_column_warns():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        assert math.isnan(flatness([math.nan]))
    assert rec


def test_zero_mean_family_has_zero_cell_means():
    em = emesh_for(0.25)
    ops = CellExtension(em.tiling.cell, em.m)
    u = input_family("zero-mean", em, ops, np.random.default_rng(0))
    cells = unfold(u, em, "Y2", mesh=em.inclusions).values
    assert np.abs(ops.mean_y2(cells)).max() < 1e-14


def test_requires_inclusion():
    with pytest.raises(ValueError):
        CellExtension(ReferenceCell(inclusion=None), 8)
