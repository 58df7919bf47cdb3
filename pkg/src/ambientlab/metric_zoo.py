"""Built-in metric families and a small expression language evaluated in jets.

Grammar (whitespace insensitive)::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := base ("^" ["-"] integer)?
    base   := number | ident | "(" expr ")" | func "(" expr ")" | "-" factor

``func`` is one of exp, log, sin, cos, sqrt and ``pi`` is a constant.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence, Union

import numpy as np

from .chart_geometry import MetricJet
from .errors import (
    ExpressionSyntaxError,
    InputError,
    SingularInputError,
    UnknownIdentifierError,
    UsageError,
)
from .jets import Jet, JetSpace

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt")
CONSTANTS = {"pi": math.pi}

# ----- AST --------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Node"


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


Node = Union[Num, Var, Const, Func, Neg, BinOp, Pow]


# ----- tokenizer & parser -------------------------------------------------------

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<num>(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()])"
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ExpressionSyntaxError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind != "ws":
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, src: str, variables: Sequence[str]):
        self.toks = _tokenize(src)
        self.i = 0
        self.variables = set(variables)

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.text != text or t.kind == "eof":
            found = "end of input" if t.kind == "eof" else repr(t.text)
            raise ExpressionSyntaxError(f"expected {text!r}, found {found}", t.line, t.col)
        return self.take()

    def parse(self) -> Node:
        node = self.expr()
        t = self.peek()
        if t.kind != "eof":
            raise ExpressionSyntaxError(f"unexpected {t.text!r}", t.line, t.col)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().text in ("+", "-") and self.peek().kind == "op":
            op = self.take().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek().text in ("*", "/") and self.peek().kind == "op":
            op = self.take().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        node = self.base()
        if self.peek().text == "^":
            self.take()
            sign = 1
            if self.peek().text == "-":
                self.take()
                sign = -1
            t = self.take()
            if t.kind != "num" or not re.fullmatch(r"\d+", t.text):
                raise ExpressionSyntaxError("exponent must be an integer literal", t.line, t.col)
            node = Pow(node, sign * int(t.text))
        return node

    def base(self) -> Node:
        t = self.peek()
        if t.kind == "num":
            self.take()
            return Num(float(t.text))
        if t.text == "-":
            self.take()
            return Neg(self.factor())
        if t.text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        if t.kind == "id":
            self.take()
            if t.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(t.text, arg)
            if t.text in CONSTANTS:
                return Const(t.text)
            if t.text in self.variables:
                return Var(t.text)
            raise UnknownIdentifierError(t.text, t.line, t.col)
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise ExpressionSyntaxError(f"unexpected {found}", t.line, t.col)


def parse_expression(src: str, variables: Sequence[str]) -> Node:
    return _Parser(src, variables).parse()


def to_source(node: Node) -> str:
    """Pretty-print an AST; re-parsing yields an identical tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, (Var, Const)):
        return node.name
    if isinstance(node, Func):
        return f"{node.name}({to_source(node.arg)})"
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        return f"-{inner}" if isinstance(node.operand, (Num, Var, Const, Func, Neg)) else f"-({inner})"
    if isinstance(node, Pow):
        inner = to_source(node.base)
        if not isinstance(node.base, (Num, Var, Const, Func)):
            inner = f"({inner})"
        return f"{inner}^{node.exponent}"
    left = to_source(node.left)
    right = to_source(node.right)
    if isinstance(node.left, BinOp) and node.op in "*/" and node.left.op in "+-":
        left = f"({left})"
    if isinstance(node.right, BinOp):
        right = f"({right})"
    return f"{left} {node.op} {right}"


def evaluate(node: Node, env: Mapping[str, Any]):
    """Evaluate with jets or numpy arrays bound to the variables."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -evaluate(node.operand, env)
    if isinstance(node, Pow):
        b = evaluate(node.base, env)
        if isinstance(b, Jet):
            return b ** node.exponent
        b = np.asarray(b, dtype=np.float64)
        if node.exponent < 0 and np.any(b == 0):
            raise SingularInputError("negative power of zero")
        return b ** float(node.exponent)
    if isinstance(node, Func):
        a = evaluate(node.arg, env)
        if isinstance(a, Jet):
            return getattr(a, node.name)()
        a = np.asarray(a, dtype=np.float64)
        if node.name == "log" and np.any(a <= 0):
            raise SingularInputError("log of a non-positive value")
        if node.name == "sqrt" and np.any(a < 0):
            raise SingularInputError("sqrt of a negative value")
        return getattr(np, node.name)(a)
    left = evaluate(node.left, env)
    right = evaluate(node.right, env)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    if not isinstance(right, Jet) and np.any(np.asarray(right) == 0):
        raise SingularInputError("division by zero")
    if isinstance(left, Jet) or isinstance(right, Jet):
        return left / right if isinstance(left, Jet) else right.__rtruediv__(left)
    return left / right


# ----- metric specs -------------------------------------------------------------


@dataclass
class MetricSpec:
    dimension: int
    variables: list[str]
    components: list[list[str]]
    description: str = ""
    asts: list[list[Node]] = field(default_factory=list, repr=False)

    def to_document(self) -> dict:
        return {
            "dimension": self.dimension,
            "variables": list(self.variables),
            "components": [[self.components[i][j] for j in range(i + 1)] for i in range(self.dimension)],
            "description": self.description,
        }

    def evaluate_grid(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        """Component values at sample points; returns ``(*grid, n, n)``."""
        env = dict(zip(self.variables, coords))
        n = self.dimension
        shape = np.broadcast_shapes(*[np.shape(c) for c in coords])
        out = np.zeros(shape + (n, n))
        for i in range(n):
            for j in range(i + 1):
                v = np.broadcast_to(np.asarray(evaluate(self.asts[i][j], env), dtype=np.float64), shape)
                out[..., i, j] = v
                out[..., j, i] = v
        return out


def parse_metric_spec(source: Union[str, Path, Mapping]) -> MetricSpec:
    """Parse a JSON metric document (text, path or already-decoded mapping)."""
    if isinstance(source, Path):
        source = source.read_text()
    if isinstance(source, str):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from exc
    else:
        doc = dict(source)
    if not isinstance(doc, dict):
        raise InputError("metric spec must be a JSON object")
    try:
        n = int(doc["dimension"])
        variables = [str(v) for v in doc["variables"]]
        rows = doc["components"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"metric spec missing or malformed field: {exc}") from exc
    if n < 1:
        raise InputError("dimension must be positive")
    if len(variables) != n or len(set(variables)) != n:
        raise InputError(f"expected {n} distinct variable names, got {variables}")
    for v in variables:
        if v in FUNCTIONS or v in CONSTANTS or not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", v):
            raise InputError(f"invalid variable name {v!r}")
    if not isinstance(rows, list) or len(rows) != n:
        raise InputError(f"components must have {n} rows")
    comps: list[list[str]] = [[""] * n for _ in range(n)]
    asts: list[list[Node]] = [[Num(0.0)] * n for _ in range(n)]
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) < i + 1:
            raise InputError(f"row {i} must contain at least {i + 1} entries (lower triangle)")
        for j in range(i + 1):
            text = str(row[j])
            try:
                node = parse_expression(text, variables)
            except (ExpressionSyntaxError, UnknownIdentifierError) as exc:
                raise type(exc)(*_exc_args(exc, i, j)) from exc
            comps[i][j] = comps[j][i] = text
            asts[i][j] = asts[j][i] = node
    return MetricSpec(n, variables, comps, str(doc.get("description", "")), asts)


def _exc_args(exc, i: int, j: int):
    if isinstance(exc, UnknownIdentifierError):
        return (exc.name, exc.line, exc.column)
    msg = str(exc).rsplit(" (line", 1)[0]
    return (f"component [{i}][{j}]: {msg}", exc.line, exc.column)


def coordinate_jets(n: int, point, order: int, space: JetSpace | None = None) -> list[Jet]:
    """Coordinate functions about ``point``; a ``(..., n)`` array of points gives batched jets."""
    space = space or JetSpace.get(n, order)
    pts = np.asarray(point, dtype=np.float64)
    if pts.ndim == 1:
        return [Jet.variable(space, v, float(pts[v])) for v in range(n)]
    out = []
    for v in range(n):
        c = np.zeros((space.size,) + pts.shape[:-1])
        c[0] = pts[..., v]
        e = [0] * space.n_vars
        e[v] = 1
        c[space.index(e)] = 1.0
        out.append(Jet(space, c))
    return out


def instantiate_jets(spec: MetricSpec, point, order: int, space: JetSpace | None = None) -> MetricJet:
    """Metric jet about ``point`` (or a batch of points, shape ``(..., n)``).

    ``space`` may carry extra parameter variables after the chart ones.
    """
    n = spec.dimension
    pts = np.asarray(point, dtype=np.float64)
    if pts.shape[-1:] != (n,):
        raise InputError(f"point has {pts.shape[-1] if pts.ndim else 0} coordinates, expected {n}")
    space = space or JetSpace.get(n, order)
    env = dict(zip(spec.variables, coordinate_jets(n, pts, order, space)))
    batch = pts.shape[:-1]
    c = np.zeros((space.size,) + batch + (n, n))
    for i in range(n):
        for j in range(i + 1):
            val = evaluate(spec.asts[i][j], env)
            if not isinstance(val, Jet):
                val = Jet.constant(space, np.broadcast_to(np.asarray(val, dtype=np.float64), batch))
            c[..., i, j] = np.broadcast_to(val.coeffs, (space.size,) + batch)
            c[..., j, i] = c[..., i, j]
    return MetricJet(Jet(space, c), n)


def instantiate_scalar(src: str, variables: Sequence[str], point, order: int, space: JetSpace | None = None) -> Jet:
    """A scalar expression (e.g. a conformal factor) as a jet about ``point``."""
    n = len(variables)
    pts = np.asarray(point, dtype=np.float64)
    space = space or JetSpace.get(n, order)
    ast = parse_expression(src, list(variables))
    val = evaluate(ast, dict(zip(variables, coordinate_jets(n, pts, order, space))))
    if not isinstance(val, Jet):
        val = Jet.constant(space, np.broadcast_to(np.asarray(val, dtype=np.float64), pts.shape[:-1]))
    return val


# ----- built-in families ----------------------------------------------------------

BUILTINS = ("flat", "sphere_stereographic", "conf_flat", "torus_perturbed", "random_jet")
ALIASES = {"sphere": "sphere_stereographic"}


def variable_names(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


def flat_spec(n: int) -> MetricSpec:
    rows = [["1" if i == j else "0" for j in range(i + 1)] for i in range(n)]
    return parse_metric_spec({"dimension": n, "variables": variable_names(n), "components": rows, "description": "flat"})


def sphere_spec(n: int) -> MetricSpec:
    r2 = " + ".join(f"x{i + 1}^2" for i in range(n))
    f = f"4/(1 + {r2})^2"
    rows = [[f if i == j else "0" for j in range(i + 1)] for i in range(n)]
    return parse_metric_spec(
        {"dimension": n, "variables": variable_names(n), "components": rows, "description": "round unit sphere, stereographic chart"}
    )


def conf_flat_spec(n: int, phi: str) -> MetricSpec:
    f = f"exp(2*({phi}))"
    rows = [[f if i == j else "0" for j in range(i + 1)] for i in range(n)]
    return parse_metric_spec(
        {"dimension": n, "variables": variable_names(n), "components": rows, "description": f"exp(2 phi) flat, phi = {phi}"}
    )


def default_phi(n: int, seed: int = 0, amplitude: float = 0.2) -> str:
    """A smooth seeded conformal factor used when none is given."""
    rng = np.random.default_rng(seed)
    terms = []
    for i in range(n):
        a, b = (float(u) * amplitude for u in rng.uniform(-1, 1, size=2))
        terms.append(f"{a!r}*sin(x{i + 1} + {float(rng.uniform(0, 1))!r}) + {b!r}*x{i + 1}^2")
    return " + ".join(terms)


def torus_spec(n: int, seed: int = 0, amplitude: float = 0.05, modes: int = 2) -> MetricSpec:
    """``delta + amplitude * h`` with ``h`` a seeded trigonometric polynomial (2 pi periodic)."""
    rng = np.random.default_rng(seed)
    vars_ = variable_names(n)
    rows = []
    for i in range(n):
        row = []
        for j in range(i + 1):
            terms = []
            for _ in range(modes):
                k = rng.integers(-1, 2, size=n)
                if not k.any():
                    k[rng.integers(n)] = 1
                phase = float(rng.uniform(0, 2 * math.pi))
                coef = float(rng.uniform(-1, 1)) * amplitude
                arg = " + ".join(f"{int(kk)}*{v}" for kk, v in zip(k, vars_) if kk) + f" + {phase!r}"
                terms.append(f"{coef!r}*cos({arg})")
            base = "1 + " if i == j else ""
            row.append(base + " + ".join(terms))
        rows.append(row)
    return parse_metric_spec(
        {"dimension": n, "variables": vars_, "components": rows, "description": f"perturbed flat torus seed={seed}"}
    )


def random_jet_metric(n: int, order: int, seed: int = 0, amplitude: float = 0.05) -> MetricJet:
    """``delta`` plus a seeded symmetric polynomial with degree-alpha coefficients in ``amplitude/alpha! * [-1, 1]``.

    Monomials are drawn in graded order, so a lower-order request is the
    truncation of a higher-order one.
    """
    space = JetSpace.get(n, order)
    rng = np.random.default_rng(seed)
    iu = np.tril_indices(n)
    draws = rng.uniform(-1.0, 1.0, size=(space.size, iu[0].size))
    fact = np.array([np.prod([math.factorial(int(e)) for e in row]) for row in space.exponents], dtype=np.float64)
    c = np.zeros((space.size, n, n))
    vals = amplitude * draws / fact[:, None]
    c[:, iu[0], iu[1]] = vals
    c[:, iu[1], iu[0]] = vals
    c[0] += np.eye(n)
    eig = np.linalg.eigvalsh(c[0])
    if eig.min() <= 0.1:
        raise InputError(f"amplitude {amplitude} too large: metric is not safely positive definite")
    return MetricJet(Jet(space, c), n)


def random_conformal_factor(n: int, order: int, seed: int = 0, amplitude: float = 0.1, degree: int = 4,
                            space: JetSpace | None = None) -> Jet:
    """Random polynomial ``omega`` of the given degree, as a jet in ``space``."""
    space = space or JetSpace.get(n, order)
    rng = np.random.default_rng(seed)
    terms = {}
    poly_space = JetSpace.get(n, degree)
    draws = rng.uniform(-1.0, 1.0, size=poly_space.size)
    for row, u in zip(poly_space.exponents, draws):
        fact = np.prod([math.factorial(int(e)) for e in row])
        terms[tuple(int(e) for e in row) + (0,) * (space.n_vars - n)] = amplitude * u / fact
    return Jet.from_terms(space, terms)


def builtin_spec(name: str, n: int, params: Mapping[str, Any] | None = None) -> MetricSpec:
    params = dict(params or {})
    name = ALIASES.get(name, name)
    if name == "flat":
        return flat_spec(n)
    if name == "sphere_stereographic":
        return sphere_spec(n)
    if name == "conf_flat":
        phi = params.get("phi") or default_phi(n, int(params.get("seed", 0)))
        return conf_flat_spec(n, str(phi))
    if name == "torus_perturbed":
        return torus_spec(n, int(params.get("seed", 0)), float(params.get("amplitude", 0.05)))
    raise UsageError(f"unknown builtin metric {name!r}; known: {', '.join(BUILTINS)}")


def builtin_metric(name: str, params: Mapping[str, Any] | None, point: Sequence[float] | None, order: int,
                   n: int | None = None) -> MetricJet:
    params = dict(params or {})
    if n is None:
        if point is None:
            raise UsageError("need a dimension or a point")
        n = len(point)
    point = list(point) if point is not None else [0.0] * n
    if len(point) != n:
        raise InputError(f"point has {len(point)} coordinates, expected {n}")
    if ALIASES.get(name, name) == "random_jet":
        return random_jet_metric(n, order, int(params.get("seed", 0)), float(params.get("amplitude", 0.05)))
    return instantiate_jets(builtin_spec(name, n, params), point, order)
