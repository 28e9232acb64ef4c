import json
import pathlib
from functools import lru_cache

import numpy as np
import pytest

from unfoldhom.fem import CoefficientModel, epsilon_mesh
from unfoldhom.geometry import Box, ReferenceCell, build_tiling

ROOT = pathlib.Path(__file__).resolve().parent.parent
BASELINES = json.loads((ROOT / "tests" / "baselines.json").read_text())

QUASI = "1 + t^2/(1 + t^2)"


def quasilinear_model(**kw):
    return CoefficientModel(QUASI, "0", "0", QUASI, **kw)


@lru_cache(maxsize=None)
def emesh_for(eps, m=8, inclusion=((0.25, 0.75), (0.25, 0.75)), domain=((0.0, 0.0), (1.0, 1.0))):
    cell = ReferenceCell((1.0, 1.0), inclusion)
    return epsilon_mesh(build_tiling(cell, Box(*domain), eps), m)


@pytest.fixture
def cell():
    return ReferenceCell()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail, seconds, limit=None):
    """Queue one pass/fail line for the end-of-run acceptance summary."""
    within = limit is None or seconds < limit
    status = "PASS" if ok and within else "FAIL"
    budget = "" if limit is None else f" / budget {limit:g} s"
    ACCEPTANCE_LINES.append((number, f"{status}  [{number}] {title}: {detail} ({seconds:.1f} s{budget})"))
    return ok and within


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
