"""Arithmetic expression language for risk scores, model parameters and MSM terms.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := ("-" | "+") unary | power
    power   := atom ("^" unary)?
    atom    := NUMBER | "k" | "(" expr ")"
             | NAME "(" expr ("," expr)* ")"
             | ("X" | "B") INT
             | "L" INT ("[" lag "]")?
             | "A" "[" lag "]"
    lag     := "k" ("-" INT)?

``L1`` without a lag means ``L1[k]``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from ..errors import EvaluationError, ScenarioError

FUNCTIONS = {
    "exp": 1,
    "log": 1,
    "expit": 1,
    "logit": 1,
    "abs": 1,
    "sqrt": 1,
    "pow": 2,
    "min": -2,  # variadic, at least two arguments
    "max": -2,
}


@dataclass(frozen=True)
class Num:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError("numeric literals are finite and non-negative")


@dataclass(frozen=True)
class Var:
    """A variable reference. ``kind`` is one of X, B, L, A, k."""

    kind: str
    index: int | None = None
    lag: int = 0
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    pos: int = field(default=0, compare=False, repr=False)


Expr = Union[Num, Var, Unary, Binary, Call]


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),\[\]]))"
)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                if text[pos:].strip() == "":
                    break
                bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ScenarioError(f"unexpected character {text[bad]!r} in expression", column=bad + 1)
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.i = 0

    def error(self, msg: str, pos: int | None = None) -> ScenarioError:
        if pos is None:
            pos = self.tokens[self.i][2] if self.i < len(self.tokens) else len(self.text)
        return ScenarioError(msg, column=pos + 1)

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, len(self.text))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            raise self.error(f"expected {value!r}" + (f", found {val!r}" if val else " at end of expression"), pos)

    def parse(self) -> Expr:
        if not self.tokens:
            raise self.error("empty expression", 0)
        e = self.expr()
        if self.i < len(self.tokens):
            raise self.error(f"unexpected {self.peek()[1]!r}")
        return e

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek()[1] in ("-", "+"):
            op = self.take()[1]
            return Unary(op, self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if val == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind != "name":
            raise self.error("expected a number, variable or function" + (f", found {val!r}" if val else ""), pos)
        if self.peek()[1] == "(":
            return self.call(val, pos)
        return self.variable(val, pos)

    def call(self, name: str, pos: int) -> Expr:
        if name not in FUNCTIONS:
            raise self.error(f"unknown function {name!r}", pos)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        arity = FUNCTIONS[name]
        if (arity > 0 and len(args) != arity) or (arity < 0 and len(args) < -arity):
            want = f"{arity}" if arity > 0 else f"at least {-arity}"
            raise self.error(f"{name}() takes {want} argument(s), got {len(args)}", pos)
        return Call(name, tuple(args), pos=pos)

    def variable(self, name: str, pos: int) -> Expr:
        if name == "k":
            return Var("k", pos=pos)
        m = re.fullmatch(r"([XBL])(\d+)", name)
        if m:
            kind, index = m.group(1), int(m.group(2))
            if index < 1:
                raise self.error(f"variable indices start at 1: {name!r}", pos)
            if kind == "L":
                lag = self.lag() if self.peek()[1] == "[" else 0
                return Var("L", index, lag, pos=pos)
            if self.peek()[1] == "[":
                raise self.error(f"baseline variable {name!r} cannot be lagged", pos)
            return Var(kind, index, 0, pos=pos)
        if name == "A":
            if self.peek()[1] != "[":
                raise self.error("treatment reference needs a visit index, e.g. A[k] or A[k-1]", pos)
            return Var("A", None, self.lag(), pos=pos)
        raise self.error(f"unknown identifier {name!r}", pos)

    def lag(self) -> int:
        self.expect("[")
        kind, val, pos = self.take()
        if val != "k":
            raise self.error("visit index must be k or k-<integer>", pos)
        lag = 0
        if self.peek()[1] == "-":
            self.take()
            kind, val, pos = self.take()
            if kind != "num" or not val.isdigit():
                raise self.error("lag must be a non-negative integer", pos)
            lag = int(val)
        elif self.peek()[1] == "+":
            raise self.error("references to future visits are not allowed")
        self.expect("]")
        return lag


def parse_expression(text: str) -> Expr:
    """Parse ``text``; errors carry a 1-based column within ``text``."""
    return _Parser(text).parse()


# ---------------------------------------------------------------- printing

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL, "^": _PREC_POW}[e.op]
    if isinstance(e, Unary):
        return _PREC_UNARY
    return _PREC_ATOM


def _wrap(e: Expr, min_prec: int) -> str:
    s = to_source(e)
    return s if _prec(e) >= min_prec else f"({s})"


def to_source(e: Expr) -> str:
    """Canonical source text; ``parse_expression(to_source(e)) == e``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        if e.kind == "k":
            return "k"
        if e.kind in ("X", "B"):
            return f"{e.kind}{e.index}"
        idx = "k" if e.lag == 0 else f"k-{e.lag}"
        name = "A" if e.kind == "A" else f"L{e.index}"
        return f"{name}[{idx}]"
    if isinstance(e, Unary):
        return f"{e.op}{_wrap(e.operand, _PREC_UNARY)}"
    if isinstance(e, Binary):
        p = _prec(e)
        if e.op == "^":
            return f"{_wrap(e.left, _PREC_ATOM)}^{_wrap(e.right, _PREC_UNARY)}"
        return f"{_wrap(e.left, p)} {e.op} {_wrap(e.right, p + 1)}"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    raise TypeError(f"not an expression node: {e!r}")


def variables(e: Expr) -> list[Var]:
    """All variable references in ``e``, in source order."""
    out: list[Var] = []

    def walk(n):
        if isinstance(n, Var):
            out.append(n)
        elif isinstance(n, Unary):
            walk(n.operand)
        elif isinstance(n, Binary):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, Call):
            for a in n.args:
                walk(a)

    walk(e)
    return out


# -------------------------------------------------------------- evaluation


class Env:
    """Variable bindings for evaluation; subclasses supply arrays or scalars."""

    k: int = 0

    def x(self, i: int):
        raise EvaluationError(f"X{i} is not available here")

    def b(self, i: int):
        raise EvaluationError(f"B{i} is not available here")

    def l(self, i: int, lag: int):
        raise EvaluationError(f"L{i} is not available here")

    def a(self, lag: int):
        raise EvaluationError("A is not available here")


class DictEnv(Env):
    """Scalar bindings: ``X``/``B`` lists, ``L`` as a list of per-visit lists, ``A`` a list.

    Visits before 0 fall back to ``defaults`` keyed by ``"L<i>"`` or ``"A"``.
    """

    def __init__(self, k=0, X=(), B=(), L=(), A=(), defaults=None):
        self.k = int(k)
        self._x, self._b, self._l, self._a = list(X), list(B), [list(v) for v in L], list(A)
        self._defaults = defaults or {}

    def x(self, i):
        try:
            return float(self._x[i - 1])
        except IndexError:
            raise EvaluationError(f"X{i} is not bound") from None

    def b(self, i):
        try:
            return float(self._b[i - 1])
        except IndexError:
            raise EvaluationError(f"B{i} is not bound") from None

    def l(self, i, lag):
        j = self.k - lag
        if j < 0:
            return float(self._defaults.get(f"L{i}", 0.0))
        try:
            return float(self._l[j][i - 1])
        except IndexError:
            raise EvaluationError(f"L{i}[k-{lag}] is not bound at k={self.k}") from None

    def a(self, lag):
        j = self.k - lag
        if j < 0:
            return float(self._defaults.get("A", 0.0))
        try:
            return float(self._a[j])
        except IndexError:
            raise EvaluationError(f"A[k-{lag}] is not bound at k={self.k}") from None


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _require(cond, msg: str):
    if not np.all(cond):
        raise EvaluationError(msg)


def _f_log(x):
    _require(x > 0, "log of a non-positive value")
    return np.log(x)


def _f_sqrt(x):
    _require(x >= 0, "sqrt of a negative value")
    return np.sqrt(x)


def _f_logit(x):
    _require((x > 0) & (x < 1), "logit argument outside (0, 1)")
    return np.log(x) - np.log1p(-x)


def _f_pow(x, y):
    with np.errstate(all="ignore"):
        out = np.power(np.asarray(x, dtype=float), y)
    _require(np.isfinite(out), "pow produced a non-finite value")
    return out


def _f_exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x)
    _require(np.isfinite(out), "exp overflow")
    return out


def _f_div(x, y):
    _require(y != 0, "division by zero")
    return x / y


_UNARY_FUNCS = {
    "exp": _f_exp,
    "log": _f_log,
    "expit": _expit,
    "logit": _f_logit,
    "abs": np.abs,
    "sqrt": _f_sqrt,
}

Compiled = Callable[[Env], object]


def compile_expression(e: Expr) -> Compiled:
    """Turn an AST into a closure ``f(env)``; works on scalars and numpy arrays."""
    if isinstance(e, Num):
        v = float(e.value)
        return lambda env: v
    if isinstance(e, Var):
        kind, i, lag = e.kind, e.index, e.lag
        if kind == "k":
            return lambda env: float(env.k)
        if kind == "X":
            return lambda env: env.x(i)
        if kind == "B":
            return lambda env: env.b(i)
        if kind == "L":
            return lambda env: env.l(i, lag)
        return lambda env: env.a(lag)
    if isinstance(e, Unary):
        f = compile_expression(e.operand)
        if e.op == "-":
            return lambda env: -f(env)
        return f
    if isinstance(e, Binary):
        fl, fr = compile_expression(e.left), compile_expression(e.right)
        op = e.op
        if op == "+":
            return lambda env: fl(env) + fr(env)
        if op == "-":
            return lambda env: fl(env) - fr(env)
        if op == "*":
            return lambda env: fl(env) * fr(env)
        if op == "/":
            return lambda env: _f_div(fl(env), fr(env))
        return lambda env: _f_pow(fl(env), fr(env))
    if isinstance(e, Call):
        fs = [compile_expression(a) for a in e.args]
        if e.name in _UNARY_FUNCS:
            fn, f0 = _UNARY_FUNCS[e.name], fs[0]
            return lambda env: fn(f0(env))
        if e.name == "pow":
            f0, f1 = fs
            return lambda env: _f_pow(f0(env), f1(env))
        reduce = np.minimum if e.name == "min" else np.maximum

        def call(env):
            out = fs[0](env)
            for f in fs[1:]:
                out = reduce(out, f(env))
            return out

        return call
    raise TypeError(f"not an expression node: {e!r}")


def eval_expression(e: Expr, env: Env) -> float:
    """Evaluate ``e`` to a single float."""
    with np.errstate(invalid="ignore", divide="ignore"):
        out = compile_expression(e)(env)
    out = np.asarray(out, dtype=float)
    if out.size != 1:
        raise EvaluationError("expression did not evaluate to a scalar")
    value = float(out.reshape(()))
    if not math.isfinite(value):
        raise EvaluationError("expression evaluated to a non-finite value")
    return value
