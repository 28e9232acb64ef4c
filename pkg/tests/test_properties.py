import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unfoldhom.cell import HomogenizedTensorTable, richardson
from unfoldhom.expr import parse_expression
from unfoldhom.extension import CellExtension
from unfoldhom.geometry import Box, ReferenceCell, build_tiling, locate
from unfoldhom.harness.config import from_dict, parse_config, serialize
from unfoldhom.unfolding import integrate_unfolded, product_identity_check, unfold

from conftest import emesh_for

finite = st.floats(-10, 10, allow_nan=False)
EXT = CellExtension(ReferenceCell(), 8)


@given(a=finite, b=finite, c=finite, y1=finite, t=finite)
def test_polynomial_expressions_match_numpy(a, b, c, y1, t):
    e = parse_expression(f"({a!r})*y1^2 + ({b!r})*y1*t - ({c!r})")
    assert e(y1=y1, y2=0.0, t=t) == pytest.approx(a * y1 ** 2 + b * y1 * t - c, rel=1e-12, abs=1e-9)


@given(eps=st.sampled_from([0.25, 0.125, 0.0625]), x1=st.floats(0, 0.999), x2=st.floats(0, 0.999))
def test_locate_reconstructs_point(eps, x1, x2):
    t = build_tiling(ReferenceCell(), Box.unit(), eps)
    k, y = locate((x1, x2), t)
    assert np.allclose(eps * (np.array(k) + y), [x1, x2], atol=1e-14)
    assert ((0 <= y) & (y < 1)).all()


@settings(max_examples=20, deadline=None)
@given(eps=st.sampled_from([0.25, 0.125]), seed=st.integers(0, 2 ** 32 - 1), part=st.sampled_from(["Y", "Y1", "Y2"]))
def test_unfolding_product_and_linearity(eps, seed, part):
    em = emesh_for(eps)
    rng = np.random.default_rng(seed)
    phi, psi = rng.standard_normal((2, em.full.n_nodes))
    assert product_identity_check(phi, psi, em, part, mesh=em.full) <= 1e-13
    a = integrate_unfolded(unfold(phi + 2 * psi, em, part, mesh=em.full))
    b = integrate_unfolded(unfold(phi, em, part, mesh=em.full)) + 2 * integrate_unfolded(unfold(psi, em, part, mesh=em.full))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), c=finite)
def test_p2_is_linear_and_preserves_y2(seed, c):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, EXT.Y2.n_nodes))
    lhs = EXT.extend_p2(u + c * v)
    rhs = EXT.extend_p2(u) + c * EXT.extend_p2(v)
    assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, abs(c))
    assert np.array_equal(EXT.extend_p2(u)[EXT._pos_y2], u)


@given(p=st.floats(0.5, 3.0), c=st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3), limit=finite)
def test_richardson_exact_on_power_laws(p, c, limit):
    vals = [limit + c * h ** p for h in (1 / 8, 1 / 16, 1 / 32)]
    got, order = richardson(vals)
    assert order == pytest.approx(p, rel=1e-6)
    assert got == pytest.approx(limit, abs=1e-9 * max(1.0, abs(limit)))


@given(s=st.floats(-3, 3))
def test_table_interpolant_stays_between_nodes(s):
    t = np.linspace(-2, 2, 5)
    tensors = (1 + t ** 2)[:, None, None] * np.eye(2)
    table = HomogenizedTensorTable(t, tensors)
    a = table(np.array([min(max(s, -2.0), 2.0)]))[0, 0, 0]
    i = int(np.clip(np.searchsorted(t, s, side="right") - 1, 0, 3))
    lo, hi = sorted((tensors[i, 0, 0], tensors[i + 1, 0, 0]))
    assert lo - 1e-12 <= a <= hi + 1e-12


@given(eps=st.lists(st.sampled_from([0.5, 0.25, 0.125, 0.0625]), min_size=1, max_size=4, unique=True),
       alpha=st.floats(0.01, 5), tol=st.floats(1e-12, 1e-4), seed=st.integers(0, 1000))
def test_config_round_trip(eps, alpha, tol, seed):
    raw = {"geometry": {"eps": sorted(eps, reverse=True)}, "model": {"alpha": alpha},
           "solver": {"picard_tol": tol}, "extbench": {"seed": seed}}
    cfg = from_dict(raw)
    assert parse_config(serialize(cfg)).to_dict() == cfg.to_dict()
