"""Scenario configuration: INI-style text, coordinate expressions, built-in scenarios."""
from __future__ import annotations

import ast
import configparser
import hashlib
import math
import operator as _op
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from .core import Grid, ProblemSpec, compute_exponents
from .operators import BellmanOperator, LinearOperator, PucciOperator
from .solvers import SolverConfig


class ConfigError(ValueError):
    """Bad configuration; ``key`` names the offending ``[section] key``."""

    def __init__(self, key: str, problem: str):
        super().__init__(f"{key}: {problem}")
        self.key = key


# ---------------------------------------------------------------------------
# expressions

_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}
_UNARY = {ast.USub: _op.neg, ast.UAdd: _op.pos}
_FUNCS = {"abs": np.abs, "sqrt": np.sqrt, "exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos,
          "min": lambda *a: _reduce(np.minimum, a), "max": lambda *a: _reduce(np.maximum, a)}
_CONSTS = {"pi": math.pi}


def _reduce(fn, args):
    if len(args) < 2:
        raise ValueError("min/max need at least two arguments")
    out = args[0]
    for a in args[1:]:
        out = fn(out, a)
    return out


def compile_expression(text: str, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """Compile an arithmetic expression over ``x1``, ``x2`` (and ``r = |x|``) into a vectorized function.

    ``^`` means power.  Only numbers, the coordinate names, ``pi``, the usual
    arithmetic and ``abs, min, max, sqrt, exp, log, sin, cos`` are allowed.
    """
    src = str(text).strip().replace("^", "**")
    if not src:
        raise ValueError("empty expression")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as err:
        raise ValueError(f"cannot parse {text!r}: {err.msg}") from None
    names = {f"x{k + 1}" for k in range(dim)} | {"r"}

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return check(node.operand)
        if isinstance(node, ast.Name):
            if node.id in names or node.id in _CONSTS:
                return
            raise ValueError(f"unknown name {node.id!r} in {text!r}")
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
                and not node.keywords:
            for a in node.args:
                check(a)
            return
        raise ValueError(f"unsupported syntax in {text!r}")

    check(tree)

    def ev(node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, env), ev(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](ev(node.operand, env))
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        return _FUNCS[node.func.id](*(ev(a, env) for a in node.args))

    def func(coords):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        env = {f"x{k + 1}": coords[:, k] for k in range(dim)}
        env["r"] = np.sqrt(np.sum(coords ** 2, axis=1))
        with np.errstate(all="ignore"):
            val = ev(tree.body, env)
        return np.broadcast_to(np.asarray(val, dtype=float), (coords.shape[0],)).copy()

    return func


# ---------------------------------------------------------------------------
# config types


@dataclass(frozen=True)
class GridConfig:
    dim: int
    lower: tuple
    upper: tuple
    nodes: tuple

    def build(self) -> Grid:
        return Grid.uniform(self.lower, self.upper, self.nodes)


@dataclass(frozen=True)
class OperatorConfig:
    family: str
    lam: float
    Lam: float
    mu: str = "0"
    members: tuple = ()   # ((A exprs...), (b exprs...)) per linear member


@dataclass(frozen=True)
class DataConfig:
    f: str
    phi: str
    psi: str
    g: str
    p: float
    q: float
    beta1: float
    exponent_dim: Optional[int] = None
    r0: Optional[float] = None
    exact: Optional[str] = None


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    grid: GridConfig
    operator: OperatorConfig
    data: DataConfig
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    eps0: float = 0.5
    output_dir: str = "out"

    def with_nodes(self, nodes) -> "ScenarioConfig":
        return replace(self, grid=replace(self.grid, nodes=tuple(int(n) for n in nodes)))

    def with_solver(self, **changes) -> "ScenarioConfig":
        return replace(self, solver=replace(self.solver, **changes))


FAMILIES = ("linear", "bellman", "pucci_plus", "pucci_minus")
SECTIONS = ("grid", "operator", "data", "solver", "output")
_SOLVER_KEYS = {f.name: f.type for f in fields(SolverConfig)}


# ---------------------------------------------------------------------------
# built-in scenarios

BUILTINS = {
    "example_1d_unilateral": """
[grid]
dim = 1
lower = -1
upper = 1
nodes = 1025

[operator]
family = linear
ellipticity = 1, 1
A = 1

[data]
f = 0
phi = -abs(x1)^1.5 + 1
psi = 1000
g = 0
p = 2
q = 2
beta1 = 0.5
exact = -abs(x1)^1.5 + 1
""",
    "poisson_no_contact": """
[grid]
dim = 1
lower = -1
upper = 1
nodes = 2049

[operator]
family = linear
ellipticity = 1, 1
A = 1

[data]
f = 2
phi = -1000
psi = 1000
g = 0
p = 2
q = 2
beta1 = 0.5
exact = 1 - x1^2
""",
    "bilateral_clip_1d": """
[grid]
dim = 1
lower = -1
upper = 1
nodes = 1025

[operator]
family = linear
ellipticity = 1, 1
A = 1

[data]
f = 2
phi = -1
psi = 0.5
g = 0
p = 2
q = 2
beta1 = 0.5
r0 = 1
exact = 0.5 - max(abs(x1) - (1 - 1/sqrt(2)), 0)^2
""",
    "pucci_2d_bilateral": """
[grid]
dim = 2
lower = -1, -1
upper = 1, 1
nodes = 65, 65

[operator]
family = pucci_plus
ellipticity = 1, 2
mu = 0.5

[data]
f = 4
phi = 0.3 - 8*(r - 0.6)^2
psi = 0.15 + r^2
g = 0
p = 4
q = 4
beta1 = 0.5
r0 = 0.1
""",
    "rough_f_1d": """
[grid]
dim = 1
lower = -1
upper = 1
nodes = 1025

[operator]
family = linear
ellipticity = 1, 1
A = 1

[data]
f = max(abs(x1), 0.001)^(-1/3)
phi = -1
psi = 0.2
g = 0
p = 1.5
q = 3
beta1 = 0.5
exponent_dim = 2
""",
}


# ---------------------------------------------------------------------------
# parsing


def _floats(key: str, text: str, count: Optional[int] = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(key, f"expected comma-separated numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise ConfigError(key, f"expected {count} values, got {len(vals)}")
    return vals


def _int(key: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {text!r}") from None


def _expr(key: str, text: str, dim: int) -> str:
    try:
        compile_expression(text, dim)
    except ValueError as err:
        raise ConfigError(key, str(err)) from None
    return text.strip()


def _exprs(key: str, text: str, dim: int) -> tuple:
    parts = [t for t in (s.strip() for s in _split_top(text)) if t]
    return tuple(_expr(key, t, dim) for t in parts)


def _split_top(text: str) -> list[str]:
    """Split on commas that are not inside parentheses."""
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
            continue
        depth += (ch == "(") - (ch == ")")
        cur.append(ch)
    out.append("".join(cur))
    return out


class _Section:
    def __init__(self, parser, name):
        self.name = name
        self.items = dict(parser.items(name)) if parser.has_section(name) else {}
        self.used = set()

    def get(self, key, default=None, required=False):
        if key in self.items:
            self.used.add(key)
            return self.items[key].strip()
        if required:
            raise ConfigError(f"[{self.name}] {key}", "missing required key")
        return default

    def key(self, k):
        return f"[{self.name}] {k}"

    def leftovers(self):
        extra = sorted(set(self.items) - self.used)
        if extra:
            raise ConfigError(self.key(extra[0]), "unknown key")


def parse_config(text: str, name: str = "inline") -> ScenarioConfig:
    """Parse INI-style config text, or a bare built-in scenario name.

    Raises :class:`ConfigError` naming the offending key.
    """
    stripped = text.strip()
    if stripped in BUILTINS:
        return parse_config(BUILTINS[stripped], name=stripped)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError("[file]", str(err).splitlines()[0]) from None
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"[{sec}]", "unknown section")
    S = {s: _Section(parser, s) for s in SECTIONS}

    sg = S["grid"]
    dim = _int(sg.key("dim"), sg.get("dim", required=True))
    if dim not in (1, 2):
        raise ConfigError(sg.key("dim"), "dimension must be 1 or 2")
    lower = _floats(sg.key("lower"), sg.get("lower", required=True), dim)
    upper = _floats(sg.key("upper"), sg.get("upper", required=True), dim)
    nodes = tuple(_int(sg.key("nodes"), v) for v in sg.get("nodes", required=True).split(","))
    if len(nodes) != dim:
        raise ConfigError(sg.key("nodes"), f"expected {dim} values")
    if any(lo >= hi for lo, hi in zip(lower, upper)):
        raise ConfigError(sg.key("upper"), "upper must exceed lower on every axis")
    if any(n < 3 for n in nodes):
        raise ConfigError(sg.key("nodes"), "need at least 3 nodes per axis")
    grid = GridConfig(dim, lower, upper, nodes)

    so = S["operator"]
    family = so.get("family", required=True)
    if family not in FAMILIES:
        raise ConfigError(so.key("family"), f"unknown family {family!r}; choose from {FAMILIES}")
    lam, Lam = _floats(so.key("ellipticity"), so.get("ellipticity", required=True), 2)
    if not 0 < lam <= Lam:
        raise ConfigError(so.key("ellipticity"), f"need 0 < lambda <= Lambda, got {lam}, {Lam}")
    mu = _expr(so.key("mu"), so.get("mu", "0"), dim)
    members = []
    if family == "linear":
        members.append((_exprs(so.key("A"), so.get("A", required=True), dim),
                        _exprs(so.key("b"), so.get("b", ""), dim)))
    elif family == "bellman":
        k = 1
        while so.get(f"A.{k}") is not None:
            members.append((_exprs(so.key(f"A.{k}"), so.get(f"A.{k}"), dim),
                            _exprs(so.key(f"b.{k}"), so.get(f"b.{k}", ""), dim)))
            k += 1
        if not members:
            raise ConfigError(so.key("A.1"), "bellman family needs members A.1, A.2, ...")
    for k, (A, b) in enumerate(members):
        if len(A) not in (1, 3 if dim == 2 else 1):
            raise ConfigError(so.key("A"), "A is one expression (times identity) or a11, a12, a22")
        if b and len(b) != dim:
            raise ConfigError(so.key("b"), f"b needs {dim} components")
    operator = OperatorConfig(family, lam, Lam, mu, tuple(members))

    sd = S["data"]
    exprs = {k: _expr(sd.key(k), sd.get(k, required=True), dim) for k in ("f", "phi", "psi", "g")}
    p, q, beta1 = (_floats(sd.key(k), sd.get(k, required=True), 1)[0] for k in ("p", "q", "beta1"))
    edim = sd.get("exponent_dim")
    edim = None if edim is None else _int(sd.key("exponent_dim"), edim)
    r0 = sd.get("r0")
    r0 = None if r0 is None else _floats(sd.key("r0"), r0, 1)[0]
    exact = sd.get("exact")
    exact = None if exact is None else _expr(sd.key("exact"), exact, dim)
    try:
        compute_exponents(edim or dim, p, q, beta1)
    except ValueError as err:
        raise ConfigError(sd.key("p"), str(err)) from None
    if edim is not None and edim < dim:
        raise ConfigError(sd.key("exponent_dim"), "must be at least the grid dimension")
    data = DataConfig(exprs["f"], exprs["phi"], exprs["psi"], exprs["g"], p, q, beta1, edim, r0, exact)

    ss = S["solver"]
    kw = {}
    for key, typ in _SOLVER_KEYS.items():
        raw = ss.get(key)
        if raw is None:
            continue
        if typ in ("int", int):
            kw[key] = _int(ss.key(key), raw)
        elif typ in ("str", str):
            kw[key] = raw
        else:
            kw[key] = _floats(ss.key(key), raw, 1)[0]
    try:
        solver = SolverConfig(**kw)
    except ValueError as err:
        raise ConfigError(ss.key(next(iter(kw), "tolerance")), str(err)) from None
    seed = _int(ss.key("seed"), ss.get("seed", "0"))
    eps0 = _floats(ss.key("eps0"), ss.get("eps0", "0.5"), 1)[0]
    if not eps0 > 0:
        raise ConfigError(ss.key("eps0"), "must be positive")
    out = S["output"].get("dir", "out")
    name = S["output"].get("name", name)
    for s in S.values():
        s.leftovers()
    return ScenarioConfig(name, grid, operator, data, solver, seed, eps0, out)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize_config(config: ScenarioConfig) -> str:
    """Canonical text form; ``parse_config(serialize_config(c)) == c``."""
    lines = ["[grid]", f"dim = {config.grid.dim}", f"lower = {_fmt(config.grid.lower)}",
             f"upper = {_fmt(config.grid.upper)}", f"nodes = {_fmt(config.grid.nodes)}", "",
             "[operator]", f"family = {config.operator.family}",
             f"ellipticity = {_fmt((config.operator.lam, config.operator.Lam))}",
             f"mu = {config.operator.mu}"]
    op = config.operator
    for k, (A, b) in enumerate(op.members, start=1):
        suffix = "" if op.family == "linear" else f".{k}"
        lines.append(f"A{suffix} = {', '.join(A)}")
        if b:
            lines.append(f"b{suffix} = {', '.join(b)}")
    d = config.data
    lines += ["", "[data]", f"f = {d.f}", f"phi = {d.phi}", f"psi = {d.psi}", f"g = {d.g}",
              f"p = {_fmt(d.p)}", f"q = {_fmt(d.q)}", f"beta1 = {_fmt(d.beta1)}"]
    if d.exponent_dim is not None:
        lines.append(f"exponent_dim = {d.exponent_dim}")
    if d.r0 is not None:
        lines.append(f"r0 = {_fmt(d.r0)}")
    if d.exact is not None:
        lines.append(f"exact = {d.exact}")
    lines += ["", "[solver]"]
    lines += [f"{k} = {_fmt(getattr(config.solver, k))}" for k in _SOLVER_KEYS]
    lines += [f"seed = {config.seed}", f"eps0 = {_fmt(config.eps0)}", "", "[output]",
              f"name = {config.name}", f"dir = {config.output_dir}", ""]
    return "\n".join(lines)


def config_hash(config: ScenarioConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()[:16]


def load_config(source: str) -> ScenarioConfig:
    """Built-in name or path to a config file."""
    if source in BUILTINS:
        return parse_config(source)
    try:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError("--config", f"cannot read {source!r}: {err.strerror}") from None
    stem = source.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return parse_config(text, name=stem)


# ---------------------------------------------------------------------------
# building problems


def _field(grid: Grid, key: str, text: str) -> np.ndarray:
    vals = compile_expression(text, grid.dim)(grid.coords)
    if not np.all(np.isfinite(vals)):
        k = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise ConfigError(key, f"expression {text!r} is not finite at {grid.coords[k]}")
    return vals


def _matrix_field(grid: Grid, A: tuple) -> np.ndarray:
    if len(A) == 1:
        a = _field(grid, "[operator] A", A[0])
        return a[:, None, None] * np.eye(grid.dim)
    a11, a12, a22 = (_field(grid, "[operator] A", t) for t in A)
    return np.stack([np.stack([a11, a12], -1), np.stack([a12, a22], -1)], -2)


_ERROR_KEYS = (("ellipticity", "[operator] ellipticity"), ("obstacles", "[data] phi"),
               ("boundary", "[data] g"), ("obstacle separation", "[data] r0"), ("mu", "[operator] mu"),
               ("|b|", "[operator] b"))


def build_problem(config: ScenarioConfig) -> ProblemSpec:
    """Assemble the discrete problem; inconsistencies come back as :class:`ConfigError`."""
    grid = config.grid.build()
    oc = config.operator
    mu = _field(grid, "[operator] mu", oc.mu)
    try:
        if oc.family in ("pucci_plus", "pucci_minus"):
            op = PucciOperator(grid, "+" if oc.family == "pucci_plus" else "-", oc.lam, oc.Lam, mu)
        else:
            members = []
            for A, b in oc.members:
                bf = None if not b else np.stack([_field(grid, "[operator] b", t) for t in b], -1)
                members.append(LinearOperator(grid, _matrix_field(grid, A), bf, oc.lam, oc.Lam, mu))
            op = members[0] if oc.family == "linear" else BellmanOperator(members)
        d = config.data
        f = _field(grid, "[data] f", d.f)
        phi = _field(grid, "[data] phi", d.phi)
        psi = _field(grid, "[data] psi", d.psi)
        g = _field(grid, "[data] g", d.g)
        ex = compute_exponents(d.exponent_dim or grid.dim, d.p, d.q, d.beta1)
        return ProblemSpec(grid, op, f, phi, psi, g, ex, d.r0)
    except ConfigError:
        raise
    except ValueError as err:
        msg = str(err)
        key = next((k for prefix, k in _ERROR_KEYS if msg.startswith(prefix) or prefix in msg), "[data]")
        raise ConfigError(key, msg) from None


def exact_solution(config: ScenarioConfig, grid: Optional[Grid] = None) -> Optional[np.ndarray]:
    if config.data.exact is None:
        return None
    grid = grid or config.grid.build()
    return _field(grid, "[data] exact", config.data.exact)
