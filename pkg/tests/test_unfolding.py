import math

import numpy as np
import pytest

from unfoldhom.fem import epsilon_mesh
from unfoldhom.geometry import Box, ReferenceCell, build_tiling
from unfoldhom.unfolding import (boundary_l2_norm, integrate_unfolded, l2_norm, physical_integral,
                                 physical_interface_l2, product_identity_check, restrict_part, unfold,
                                 unfold_boundary, unfold_gradient_check, unfolding_error)

from conftest import emesh_for

BILINEAR = lambda x: (1 + x[..., 0]) * (2 - x[..., 1])


def box_integral(lo, hi):
    """Closed form of the integral of (1 + x1)(2 - x2) over a box."""
    (a, c), (b, d) = lo, hi
    i1 = (b - a) + 0.5 * (b * b - a * a)
    i2 = 2 * (d - c) - 0.5 * (d * d - c * c)
    return i1 * i2


@pytest.mark.parametrize("eps", [0.25, 0.125])
def test_integration_identity_against_closed_form(eps):
    em = emesh_for(eps)
    vals = em.full.interpolate(BILINEAR)
    whole = integrate_unfolded(unfold(vals, em, "Y", mesh=em.full))
    assert whole == pytest.approx(box_integral((0, 0), (1, 1)), rel=1e-13)
    inc = sum(box_integral(((k[0] + 0.25) * eps, (k[1] + 0.25) * eps), ((k[0] + 0.75) * eps, (k[1] + 0.75) * eps))
              for k in em.tiling.cells)
    assert integrate_unfolded(unfold(vals, em, "Y2", mesh=em.full)) == pytest.approx(inc, rel=1e-12)
    assert integrate_unfolded(unfold(vals, em, "Y1", mesh=em.full)) == pytest.approx(whole - inc, rel=1e-12)


def test_integration_identity_on_inexact_paving():
    cell = ReferenceCell()
    em = epsilon_mesh(build_tiling(cell, Box((0.0, 0.0), (1.125, 1.0)), 0.25), 8)
    vals = em.full.interpolate(BILINEAR)
    lhs = integrate_unfolded(unfold(vals, em, "Y", mesh=em.full))
    assert lhs == pytest.approx(box_integral((0, 0), (1, 1)), rel=1e-13)
    assert physical_integral(vals, em, "Y", mesh=em.full) == pytest.approx(lhs, rel=1e-13)


@pytest.mark.parametrize("eps", [0.25, 0.125])
def test_product_and_gradient_identities(eps, rng):
    em = emesh_for(eps)
    phi = rng.standard_normal(em.full.n_nodes)
    psi = rng.standard_normal(em.full.n_nodes)
    assert product_identity_check(phi, psi, em, "Y", mesh=em.full) <= 1e-13
    assert unfold_gradient_check(phi, em, "Y", mesh=em.full) <= 1e-13
    u1 = rng.standard_normal(em.matrix.n_nodes)
    assert unfold_gradient_check(u1, em, "Y1", mesh=em.matrix) <= 1e-13


def test_norm_identity_on_exact_paving(rng):
    em = emesh_for(0.25)
    phi = rng.standard_normal(em.full.n_nodes)
    v = em.full.values_at_qp(phi)
    direct = math.sqrt(float((v * v).sum() * em.full.qp_weight))
    assert l2_norm(unfold(phi, em, "Y", mesh=em.full)) == pytest.approx(direct, rel=1e-13)


@pytest.mark.parametrize("eps", [0.25, 0.125])
def test_boundary_identity_against_closed_form(eps):
    em = emesh_for(eps)
    trace = em.matrix.interpolate(lambda x: x[..., 0])
    # independent: x1^2 integrated over every inclusion perimeter
    total = 0.0
    for k in em.tiling.cells:
        a, b = (k[0] + 0.25) * eps, (k[0] + 0.75) * eps
        side = 0.5 * eps
        total += 2 * (b ** 3 - a ** 3) / 3  # horizontal sides
        total += side * (a * a + b * b)  # vertical sides
    assert physical_interface_l2(trace, em, mesh=em.matrix) ** 2 == pytest.approx(total, rel=1e-13)
    lhs = boundary_l2_norm(unfold_boundary(trace, em, mesh=em.matrix)) ** 2
    assert lhs == pytest.approx(eps * total, rel=1e-12)


def test_parts_reassemble(rng):
    em = emesh_for(0.25)
    phi = rng.standard_normal(em.full.n_nodes)
    whole = unfold(phi, em, "Y", mesh=em.full)
    for part in ("Y1", "Y2"):
        assert np.array_equal(restrict_part(whole, part).values, unfold(phi, em, part, mesh=em.full).values)


def test_unfolded_cells_are_translates():
    em = emesh_for(0.25)
    field = unfold(em.full.interpolate(lambda x: x[..., 0]), em, "Y", mesh=em.full)
    micro_x = field.micro.coords[:, 0]
    for c, k in enumerate(em.tiling.cells):
        assert np.allclose(field.values[c], 0.25 * (k[0] + micro_x), atol=1e-15)


def test_foreign_mesh_rejected():
    a, b = emesh_for(0.25), emesh_for(0.125)
    with pytest.raises(ValueError, match="non-conforming"):
        unfold(np.zeros(b.full.n_nodes), a, "Y", mesh=b.full)


def test_convergence_ladder():
    phi = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    errs = [unfolding_error(phi, emesh_for(e)) for e in (0.25, 0.125, 0.0625, 0.03125)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] / errs[0] <= 0.5
    # the unfolding error of a smooth function is O(eps)
    rates = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert min(rates) > 0.9
