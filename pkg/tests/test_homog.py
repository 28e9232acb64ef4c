import math

import numpy as np
import pytest

from unfoldhom.cell import HomogenizedTensorTable, homogenized_tensor, tabulate
from unfoldhom.fem import CoefficientModel
from unfoldhom.fine import FineSolution, constant_source, solve_fine
from unfoldhom.geometry import Box, ReferenceCell
from unfoldhom.homog import (HomogenizedSolution, homogenize, homogenized_truncation, interface_mean_conductance,
                            jump_offset, limit_residual, reference_mesh, solve_homogenized, table_range,
                            two_scale_residuals)

from conftest import emesh_for, quasilinear_model

SQUARE = ReferenceCell()
ONE = constant_source(1.0)


def center_value_series(terms=200):
    """u(1/2, 1/2) for -Laplace u = 1 on the unit square, by the double sine series."""
    total = 0.0
    for m in range(1, terms, 2):
        for n in range(1, terms, 2):
            sign = (-1) ** ((m - 1) // 2 + (n - 1) // 2)
            total += sign * 16.0 / (math.pi ** 4 * m * n * (m * m + n * n))
    return total


def test_center_value_against_series():
    a = 0.6
    table = HomogenizedTensorTable(np.array([0.0]), np.array([a * np.eye(2)]), constant=True)
    sol = solve_homogenized(table, ONE, reference_mesh(Box.unit(), 64))
    got = float(sol.value(np.array([[0.5, 0.5]]))[0])
    assert got == pytest.approx(center_value_series() / a, rel=5e-3)
    assert sol.iterations == 1


def test_offset_for_square_inclusion():
    mean_h = interface_mean_conductance(SQUARE, CoefficientModel(), 8)
    assert mean_h == pytest.approx(1.0)
    assert jump_offset(SQUARE, mean_h) == pytest.approx(0.25 / 2.0)
    assert interface_mean_conductance(SQUARE, CoefficientModel(h="1 + 0.5*sin(2*pi*y1)"), 16) == \
        pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        jump_offset(SQUARE, 0.0)


def test_table_range_padding():
    assert table_range([0.0, 1.0]) == pytest.approx((-0.2, 1.2))
    assert table_range([0.0, 0.0]) == pytest.approx((-0.2, 0.2))


def test_linear_homogenize_reconstructs_u2():
    mesh = reference_mesh(Box.unit(), 32)
    sol = homogenize(CoefficientModel(), SQUARE, 8, ONE, mesh)
    assert sol.iterations == 1 and sol.offset == pytest.approx(0.125)
    assert np.allclose(sol.u2, sol.u1 + 0.125)


def test_quasilinear_homogenize_has_no_clamping():
    sol = homogenize(quasilinear_model(), SQUARE, 8, ONE, reference_mesh(Box.unit(), 32), samples=9)
    assert sol.trace[-1] <= 1e-8
    assert sol.warnings == []
    lo, hi = sol.table.t_range
    assert lo < sol.u1.min() and sol.u1.max() < hi


def test_quasilinear_limit_weak_form():
    sol = homogenize(quasilinear_model(), SQUARE, 8, ONE, reference_mesh(Box.unit(), 64), samples=9)
    assert limit_residual(sol, quasilinear_model(), SQUARE) < 1e-2


def test_synthetic_residuals_are_exact():
    em = emesh_for(0.25)
    c, offset = 0.3, 0.125
    table = tabulate(CoefficientModel(), SQUARE, 8)
    mesh = reference_mesh(Box.unit(), 32)
    homog = HomogenizedSolution(mesh, np.full(mesh.n_nodes, c), table, [0.0], ONE, offset=offset)
    fine = FineSolution(em, CoefficientModel(), np.full(em.matrix.n_nodes, c), np.full(em.inclusions.n_nodes, c),
                        1.0, [0.0], False)
    r = two_scale_residuals(fine, homog)
    assert r["e1"] == pytest.approx(0.0, abs=1e-14)
    assert r["grad_plain"] < 1e-14 and r["grad_corrected"] < 1e-14
    # the inclusion limit sits offset * f above u1 on the paved domain of measure 1
    assert r["r_jump"] == pytest.approx(offset, rel=1e-13)
    assert r["e2"] == pytest.approx(offset * math.sqrt(0.25), rel=1e-13)


def test_mismatched_domains_rejected():
    em = emesh_for(0.25)
    table = tabulate(CoefficientModel(), SQUARE, 8)
    mesh = reference_mesh(Box((0.5, 0.0), (1.5, 1.0)), 8)
    homog = HomogenizedSolution(mesh, np.zeros(mesh.n_nodes), table, [0.0], ONE)
    fine = FineSolution(em, CoefficientModel(), np.zeros(em.matrix.n_nodes), np.zeros(em.inclusions.n_nodes),
                        1.0, [0.0], False)
    with pytest.raises(ValueError):
        two_scale_residuals(fine, homog)


def test_short_linear_ladder():
    mesh = reference_mesh(Box.unit(), 128)
    homog = homogenize(CoefficientModel(), SQUARE, 8, ONE, mesh)
    rows = [two_scale_residuals(solve_fine(emesh_for(e), CoefficientModel(), ONE), homog)
            for e in (0.25, 0.125, 0.0625)]
    for key in ("e1", "r_jump", "grad_corrected"):
        vals = [r[key] for r in rows]
        assert vals[0] > vals[1] > vals[2]
    assert rows[-1]["grad_corrected"] < rows[-1]["grad_plain"]


def test_homogenized_truncation_is_full_energy_for_large_k():
    a0 = homogenized_tensor(0.0, SQUARE, 8, CoefficientModel())
    mesh = reference_mesh(Box.unit(), 16)
    sol = homogenize(CoefficientModel(), SQUARE, 8, ONE, mesh)
    rows = homogenized_truncation(sol, [10.0])
    g = mesh.gradients_at_qp(sol.u1)
    full = float(np.einsum("eqa,ab,eqb->", g, a0, g) * mesh.qp_weight)
    assert rows[0]["scaled_energy"] * 10.0 == pytest.approx(full, rel=1e-12)
