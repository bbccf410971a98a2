"""Arithmetic expression language for problem coefficients.

Grammar (lowest to highest precedence)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom (('^' | '**') unary)?          # right associative
    atom    := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'

Variables are ``t``, ``x0 .. x{n-1}`` and ``xi0 .. xi{n-1}``.  Functions are
``abs exp sqrt sin cos max0`` (one argument) and ``min max pow`` (two).
Trees are immutable and compare structurally, so ``parse(to_source(e)) == e``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import (
    ArityError,
    ExprDomainError,
    ExprSyntaxError,
    MissingVariableError,
    UnknownIdentifierError,
)

__all__ = [
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Expr",
    "parse_expr",
    "eval_expr",
    "to_source",
    "variables",
    "UNARY_FUNCS",
    "BINARY_FUNCS",
]


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # 'neg' or a name in UNARY_FUNCS
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # '+', '-', '*', '/', 'pow', 'min', 'max'
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Unary, Binary]

UNARY_FUNCS = ("abs", "exp", "sqrt", "sin", "cos", "max0")
BINARY_FUNCS = ("min", "max", "pow")

_VAR_RE = re.compile(r"^(t|x(\d+)|xi(\d+))$")
_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),])"
    r")"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # number | name | op | end
    text: str
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str, dim: int | None):
        self.tokens = _tokenize(source)
        self.i = 0
        self.dim = dim

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Token:
        if self.tok.text != text or self.tok.kind != "op":
            raise ExprSyntaxError(f"expected {text!r}, got {self.tok.text or 'end of input'!r}", self.tok.pos)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected token {self.tok.text!r}", self.tok.pos)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            left = Binary(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            op = self.advance().text
            left = Binary(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.advance()
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text in ("^", "**"):
            self.advance()
            return Binary("pow", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if tok.kind == "name":
            self.advance()
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(tok)
            return self.variable(tok)
        raise ExprSyntaxError(f"unexpected {tok.text or 'end of input'!r}", tok.pos)

    def call(self, name: _Token) -> Expr:
        if name.text not in UNARY_FUNCS and name.text not in BINARY_FUNCS:
            raise UnknownIdentifierError(f"unknown function {name.text!r}", name.pos)
        self.expect("(")
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        want = 1 if name.text in UNARY_FUNCS else 2
        if len(args) != want:
            raise ArityError(f"{name.text} takes {want} argument(s), got {len(args)}", name.pos)
        if want == 1:
            return Unary(name.text, args[0])
        return Binary(name.text, args[0], args[1])

    def variable(self, tok: _Token) -> Expr:
        m = _VAR_RE.match(tok.text)
        if m is None:
            raise UnknownIdentifierError(f"unknown identifier {tok.text!r}", tok.pos)
        index = m.group(2) or m.group(3)
        if index is not None and self.dim is not None and int(index) >= self.dim:
            raise UnknownIdentifierError(
                f"{tok.text!r} exceeds state dimension {self.dim}", tok.pos
            )
        return Var(tok.text)


def parse_expr(source: str, dim: int | None = None) -> Expr:
    """Parse ``source`` into an expression tree.

    If ``dim`` is given, component variables beyond it are rejected.
    """
    return _Parser(source, dim).parse()


_PREC_OPS = {"+", "-", "*", "/"}


def to_source(e: Expr) -> str:
    """Print ``e`` in a fully parenthesised form that parses back to ``e``."""
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{to_source(e.arg)})"
        return f"{e.op}({to_source(e.arg)})"
    if e.op in _PREC_OPS:
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    if e.op == "pow":
        return f"({to_source(e.left)} ^ {to_source(e.right)})"
    return f"{e.op}({to_source(e.left)}, {to_source(e.right)})"


def variables(e: Expr) -> set[str]:
    """Names of all variables referenced by ``e``."""
    out: set[str] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add(node.name)
        elif isinstance(node, Unary):
            stack.append(node.arg)
        elif isinstance(node, Binary):
            stack.extend((node.left, node.right))
    return out


# --- evaluation -------------------------------------------------------------

ArrayLike = Union[float, np.ndarray]


def _first_bad(mask) -> int | None:
    mask = np.asarray(mask)
    if mask.ndim == 0:
        return None
    return int(np.flatnonzero(mask.ravel())[0])


def _check_finite(value, what: str):
    bad = ~np.isfinite(value)
    if np.any(bad):
        raise ExprDomainError(f"non-finite result in {what}", _first_bad(bad))
    return value


class _Env:
    def __init__(self, t, x, xi):
        self.t = t
        self.x = x
        self.xi = xi

    def lookup(self, name: str):
        if name == "t":
            if self.t is None:
                raise MissingVariableError("variable 't' was not supplied")
            return self.t
        m = _VAR_RE.match(name)
        if m.group(2) is not None:
            vec, idx, label = self.x, int(m.group(2)), "x"
        else:
            vec, idx, label = self.xi, int(m.group(3)), "xi"
        if vec is None:
            raise MissingVariableError(f"variable {name!r} referenced but {label} was not supplied")
        if idx >= len(vec):
            raise MissingVariableError(f"variable {name!r} out of range for {label} of length {len(vec)}")
        return vec[idx]


def _eval(e: Expr, env: _Env):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return env.lookup(e.name)
    if isinstance(e, Unary):
        a = _eval(e.arg, env)
        op = e.op
        if op == "neg":
            return -a
        if op == "abs":
            return np.abs(a)
        if op == "max0":
            return np.maximum(a, 0.0)
        if op == "sin":
            return np.sin(a)
        if op == "cos":
            return np.cos(a)
        if op == "sqrt":
            neg = np.asarray(a) < 0
            if np.any(neg):
                raise ExprDomainError("sqrt of a negative number", _first_bad(neg))
            return np.sqrt(a)
        if op == "exp":
            with np.errstate(over="ignore"):
                return _check_finite(np.exp(a), "exp")
        raise AssertionError(op)
    a = _eval(e.left, env)
    b = _eval(e.right, env)
    op = e.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        zero = np.broadcast_to(np.asarray(b) == 0, np.broadcast(a, b).shape)
        if np.any(zero):
            raise ExprDomainError("division by zero", _first_bad(zero))
        return a / b
    if op == "min":
        return np.minimum(a, b)
    if op == "max":
        return np.maximum(a, b)
    if op == "pow":
        with np.errstate(all="ignore"):
            r = np.power(np.asarray(a, dtype=float), b)
        return _check_finite(r, "pow")
    raise AssertionError(op)


def eval_expr(e: Expr, t: ArrayLike | None = None, x: Sequence | np.ndarray | None = None,
              xi: Sequence | np.ndarray | None = None):
    """Evaluate ``e`` at time ``t``, state ``x`` and impulse ``xi``.

    ``x`` and ``xi`` are indexed by component; each component may be a scalar
    or an array, and arrays broadcast.  Returns a float when every input is
    scalar, otherwise an array.  Raises :class:`ExprDomainError` on division by
    zero, sqrt of a negative or a non-finite result, and
    :class:`MissingVariableError` when a referenced variable is absent.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        value = _eval(e, _Env(t, x, xi))
    value = _check_finite(value, "expression")
    if np.ndim(value) == 0:
        return float(value)
    return value
