"""Experiment configuration: TOML in, validated dataclasses out, TOML back.

Layout::

    [geometry]   periods, inclusion (or "none"), domain, eps, m, boundary_inclusions
    [model]      a11 a12 a21 a22 h (expression strings), alpha, data ("L2" | "L1"),
                 f (expression over x1, x2), spike_center, spike_mass, gamma
    [solver]     picard_tol, maxit, linear_tol, damping, table_samples, t_range,
                 reference_n, cell_m, k_list
    [extbench]   seed, eta, families
    [outputs]    directory, formats

Every key is optional; missing keys take the defaults below.
"""
from __future__ import annotations

import copy
import hashlib
import re
import sys
from dataclasses import asdict, dataclass, field

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..expr import ExpressionError, parse_expression


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    periods: list = field(default_factory=lambda: [1.0, 1.0])
    inclusion: object = field(default_factory=lambda: [[0.25, 0.75], [0.25, 0.75]])
    domain: list = field(default_factory=lambda: [[0.0, 0.0], [1.0, 1.0]])
    eps: list = field(default_factory=lambda: [0.25, 0.125, 0.0625, 0.03125])
    m: int = 8
    boundary_inclusions: bool = True


@dataclass
class ModelConfig:
    a11: str = "1"
    a12: str = "0"
    a21: str = "0"
    a22: str = "1"
    h: str = "1"
    alpha: float = 1.0
    data: str = "L2"
    f: str = "1"
    spike_center: list = field(default_factory=lambda: [0.5, 0.5])
    spike_mass: float = 1.0
    gamma: float = 1.0


@dataclass
class SolverConfig:
    picard_tol: float = 1e-8
    maxit: int = 50
    linear_tol: float = 1e-12
    damping: float = 0.5
    table_samples: int = 21
    t_range: list = field(default_factory=lambda: [-5.0, 5.0])
    reference_n: int = 0
    cell_m: list = field(default_factory=lambda: [16, 32, 64])
    k_list: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])


@dataclass
class ExtbenchConfig:
    seed: int = 0
    eta: float = 0.125
    families: list = field(default_factory=lambda: ["zero-mean", "constant"])


@dataclass
class OutputConfig:
    directory: str = ""
    formats: list = field(default_factory=lambda: ["csv", "json", "svg"])


@dataclass
class ExperimentConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    extbench: ExtbenchConfig = field(default_factory=ExtbenchConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self):
        d = asdict(self)
        if d["geometry"]["inclusion"] is None:
            d["geometry"]["inclusion"] = "none"
        return d

    def digest(self):
        """sha256 of the canonical serialization (output directory excluded)."""
        d = self.to_dict()
        d["outputs"].pop("directory")
        return hashlib.sha256(tomli_w.dumps(d).encode()).hexdigest()

    # model objects -------------------------------------------------------

    def cell(self):
        from ..geometry import ReferenceCell

        inc = self.geometry.inclusion
        return ReferenceCell(tuple(self.geometry.periods), None if inc is None else tuple(map(tuple, inc)))

    def domain(self):
        from ..geometry import Box

        lo, hi = self.geometry.domain
        return Box(tuple(lo), tuple(hi))

    def coefficient(self):
        from ..fem import CoefficientModel

        m = self.model
        return CoefficientModel(m.a11, m.a12, m.a21, m.a22, m.h, m.alpha, tuple(self.geometry.periods))


SECTIONS = {
    "geometry": GeometryConfig,
    "model": ModelConfig,
    "solver": SolverConfig,
    "extbench": ExtbenchConfig,
    "outputs": OutputConfig,
}


def _line_of(text, section, key):
    """1-based line of ``key`` inside ``[section]``, or None."""
    if text is None:
        return None
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        head = re.match(r"\[\s*([A-Za-z_]+)\s*\]", s)
        if head:
            current = head.group(1)
        elif current == section and re.match(rf"{re.escape(key)}\s*=", s):
            return n
    return None


class _Validator:
    def __init__(self, text):
        self.text = text

    def fail(self, section, key, message):
        line = _line_of(self.text, section, key)
        where = f"{section}.{key}" + (f" (line {line})" if line else "")
        raise ConfigError(f"{where}: {message}")

    def number(self, section, key, value, positive=False, integer=False):
        ok = isinstance(value, int) if integer else isinstance(value, (int, float))
        if isinstance(value, bool) or not ok:
            self.fail(section, key, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
        if positive and value <= 0:
            self.fail(section, key, f"must be positive, got {value!r}")
        return value if integer else float(value)

    def numbers(self, section, key, value, length=None, positive=False, integer=False):
        if not isinstance(value, list):
            self.fail(section, key, f"expected a list, got {value!r}")
        if length is not None and len(value) != length:
            self.fail(section, key, f"expected {length} entries, got {len(value)}")
        return [self.number(section, key, v, positive, integer) for v in value]

    def expression(self, section, key, value, variables):
        if not isinstance(value, str):
            self.fail(section, key, f"expression must be a quoted string, got {value!r}")
        try:
            parse_expression(value, variables)
        except ExpressionError as exc:
            self.fail(section, key, str(exc))
        return value


def _build(raw, text=None):
    v = _Validator(text)
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    for name in raw:
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    parts = {}
    for name, cls in SECTIONS.items():
        block = raw.get(name, {})
        if not isinstance(block, dict):
            raise ConfigError(f"[{name}] must be a table")
        known = set(cls.__dataclass_fields__)
        for key in block:
            if key not in known:
                v.fail(name, key, "unknown key")
        obj = cls()
        for key, value in block.items():
            setattr(obj, key, copy.deepcopy(value))
        parts[name] = obj

    g = parts["geometry"]
    g.periods = v.numbers("geometry", "periods", g.periods, 2, positive=True)
    if g.inclusion in ("none", None):
        g.inclusion = None
    else:
        if not isinstance(g.inclusion, list) or len(g.inclusion) != 2:
            v.fail("geometry", "inclusion", "expected [[lo1, hi1], [lo2, hi2]] or \"none\"")
        g.inclusion = [v.numbers("geometry", "inclusion", pair, 2) for pair in g.inclusion]
        for lo, hi in g.inclusion:
            if not 0 < lo < hi < 1:
                v.fail("geometry", "inclusion", f"fractions must satisfy 0 < low < high < 1, got {[lo, hi]}")
    if not isinstance(g.domain, list) or len(g.domain) != 2:
        v.fail("geometry", "domain", "expected [[x1_lo, x2_lo], [x1_hi, x2_hi]]")
    g.domain = [v.numbers("geometry", "domain", corner, 2) for corner in g.domain]
    if any(hi <= lo for lo, hi in zip(*g.domain)):
        v.fail("geometry", "domain", "upper corner must exceed lower corner")
    g.eps = v.numbers("geometry", "eps", g.eps, positive=True)
    if not g.eps:
        v.fail("geometry", "eps", "list is empty")
    if any(b >= a for a, b in zip(g.eps, g.eps[1:])):
        v.fail("geometry", "eps", "must be strictly decreasing")
    g.m = v.number("geometry", "m", g.m, positive=True, integer=True)
    if not isinstance(g.boundary_inclusions, bool):
        v.fail("geometry", "boundary_inclusions", "expected true or false")

    m = parts["model"]
    for key in ("a11", "a12", "a21", "a22"):
        v.expression("model", key, getattr(m, key), ("y1", "y2", "t"))
    v.expression("model", "h", m.h, ("y1", "y2"))
    v.expression("model", "f", m.f, ("x1", "x2"))
    m.alpha = v.number("model", "alpha", m.alpha, positive=True)
    if m.data not in ("L2", "L1"):
        v.fail("model", "data", f"expected \"L2\" or \"L1\", got {m.data!r}")
    m.spike_center = v.numbers("model", "spike_center", m.spike_center, 2)
    m.spike_mass = v.number("model", "spike_mass", m.spike_mass, positive=True)
    m.gamma = v.number("model", "gamma", m.gamma)

    s = parts["solver"]
    s.picard_tol = v.number("solver", "picard_tol", s.picard_tol, positive=True)
    s.maxit = v.number("solver", "maxit", s.maxit, positive=True, integer=True)
    s.linear_tol = v.number("solver", "linear_tol", s.linear_tol, positive=True)
    s.damping = v.number("solver", "damping", s.damping, positive=True)
    if s.damping > 1:
        v.fail("solver", "damping", "must lie in (0, 1]")
    s.table_samples = v.number("solver", "table_samples", s.table_samples, positive=True, integer=True)
    s.t_range = v.numbers("solver", "t_range", s.t_range, 2)
    if s.t_range[1] < s.t_range[0]:
        v.fail("solver", "t_range", "upper end below lower end")
    s.reference_n = v.number("solver", "reference_n", s.reference_n, integer=True)
    if s.reference_n < 0:
        v.fail("solver", "reference_n", "must be >= 0 (0 selects the finest eps grid)")
    s.cell_m = v.numbers("solver", "cell_m", s.cell_m, positive=True, integer=True)
    s.k_list = v.numbers("solver", "k_list", s.k_list, positive=True)
    if any(b <= a for a, b in zip(s.k_list, s.k_list[1:])):
        v.fail("solver", "k_list", "must be increasing")

    e = parts["extbench"]
    e.seed = v.number("extbench", "seed", e.seed, integer=True)
    e.eta = v.number("extbench", "eta", e.eta, positive=True)
    if not isinstance(e.families, list) or not all(isinstance(x, str) for x in e.families):
        v.fail("extbench", "families", "expected a list of strings")
    for fam in e.families:
        if fam not in ("zero-mean", "constant", "smooth", "zero"):
            v.fail("extbench", "families", f"unknown family {fam!r}")

    o = parts["outputs"]
    if not isinstance(o.directory, str):
        v.fail("outputs", "directory", "expected a string")
    if not isinstance(o.formats, list) or any(x not in ("csv", "json", "svg") for x in o.formats):
        v.fail("outputs", "formats", "expected a subset of [\"csv\", \"json\", \"svg\"]")
    return ExperimentConfig(**parts)


def parse_config(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}") from exc
    return _build(raw, text)


def load_config(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 text") from exc
    return parse_config(text)


def from_dict(raw):
    return _build(copy.deepcopy(raw))


def serialize(config):
    return tomli_w.dumps(config.to_dict())
