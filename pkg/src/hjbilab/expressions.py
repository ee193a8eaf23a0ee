"""Small arithmetic grammar for coefficient fields.

Grammar (whitespace is ignored)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-') unary | power
    power   := atom (('^' | '**') unary)?
    atom    := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Names are the constant ``pi``, state components ``x1..xn``, fast-state
components ``y1..ym``, control components ``a1..`` (first player, the
maximizer) and ``b1..`` (second player, the minimizer). Functions:
``sin cos tan exp log sqrt abs min max``; ``min``/``max`` take two or more
arguments.

Parsed trees evaluate on numpy arrays and print back to canonical text, so
an expression survives a round trip through a config file unchanged.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ExpressionError

FUNCTIONS = {
    "sin": (np.sin, 1),
    "cos": (np.cos, 1),
    "tan": (np.tan, 1),
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "sqrt": (np.sqrt, 1),
    "abs": (np.abs, 1),
    "min": (None, -2),
    "max": (None, -2),
}

CONSTANTS = {"pi": math.pi}

VARIABLE_RE = re.compile(r"^[xyab][1-9][0-9]*$")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),])
    """,
    re.VERBOSE,
)


class Expr:
    """Base node. Subclasses are immutable."""

    def evaluate(self, env: Mapping[str, object]):
        raise NotImplementedError

    def variables(self) -> frozenset:
        raise NotImplementedError

    def substitute(self, mapping: Mapping[str, "Expr"]) -> "Expr":
        raise NotImplementedError

    def is_constant(self) -> bool:
        return not self.variables()

    # precedence used by the printer
    _prec = 100


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def evaluate(self, env):
        return self.value

    def variables(self):
        return frozenset()

    def substitute(self, mapping):
        return self

    def __str__(self):
        v = self.value
        if v == int(v) and abs(v) < 1e15:
            return str(int(v)) if v >= 0 else f"({int(v)})"
        text = repr(float(v))
        return text if v >= 0 else f"({text})"


@dataclass(frozen=True)
class Const(Expr):
    name: str

    def evaluate(self, env):
        return CONSTANTS[self.name]

    def variables(self):
        return frozenset()

    def substitute(self, mapping):
        return self

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def evaluate(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise ExpressionError(f"unbound variable '{self.name}'") from None

    def variables(self):
        return frozenset([self.name])

    def substitute(self, mapping):
        return mapping.get(self.name, self)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr
    _prec = 3

    def evaluate(self, env):
        return -self.arg.evaluate(env)

    def variables(self):
        return self.arg.variables()

    def substitute(self, mapping):
        return Neg(self.arg.substitute(mapping))

    def __str__(self):
        return f"-{_wrap(self.arg, self._prec)}"


_BINOPS = {
    "+": (1, np.add),
    "-": (1, np.subtract),
    "*": (2, np.multiply),
    "/": (2, np.true_divide),
    "^": (4, np.power),
}


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    @property
    def _prec(self):
        return _BINOPS[self.op][0]

    def evaluate(self, env):
        fn = _BINOPS[self.op][1]
        return fn(self.left.evaluate(env), self.right.evaluate(env))

    def variables(self):
        return self.left.variables() | self.right.variables()

    def substitute(self, mapping):
        return BinOp(self.op, self.left.substitute(mapping), self.right.substitute(mapping))

    def __str__(self):
        p = self._prec
        if self.op == "^":
            # right associative
            return f"{_wrap(self.left, p + 1)}^{_wrap(self.right, p)}"
        right_min = p + 1 if self.op in "-/" else p
        return f"{_wrap(self.left, p)} {self.op} {_wrap(self.right, right_min)}"


@dataclass(frozen=True)
class Call(Expr):
    func: str
    args: tuple

    def evaluate(self, env):
        vals = [a.evaluate(env) for a in self.args]
        if self.func == "min":
            out = vals[0]
            for v in vals[1:]:
                out = np.minimum(out, v)
            return out
        if self.func == "max":
            out = vals[0]
            for v in vals[1:]:
                out = np.maximum(out, v)
            return out
        return FUNCTIONS[self.func][0](vals[0])

    def variables(self):
        out = frozenset()
        for a in self.args:
            out |= a.variables()
        return out

    def substitute(self, mapping):
        return Call(self.func, tuple(a.substitute(mapping) for a in self.args))

    def __str__(self):
        return f"{self.func}({', '.join(str(a) for a in self.args)})"


def _wrap(node, min_prec):
    text = str(node)
    if node._prec < min_prec:
        return f"({text})"
    return text


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None:
                raise ExpressionError(f"unexpected character {text[pos]!r}", pos + 1, source=text)
            kind = m.lastgroup
            if kind != "ws":
                self.tokens.append((kind, m.group(), pos + 1))
            pos = m.end()
        self.tokens.append(("end", "", len(text) + 1))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message, tok=None):
        tok = tok or self.peek()
        raise ExpressionError(message, tok[2], source=self.text)

    def expect(self, value):
        tok = self.peek()
        if tok[1] != value:
            shown = "end of input" if tok[0] == "end" else repr(tok[1])
            self.fail(f"expected '{value}', found {shown}")
        return self.take()

    def parse(self):
        if self.peek()[0] == "end":
            self.fail("empty expression")
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            arg = self.unary()
            if isinstance(arg, Num):
                return Num(-arg.value)
            return Neg(arg)
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        tok = self.peek()
        kind, value, col = tok
        if kind == "number":
            self.take()
            return Num(float(value))
        if kind == "name":
            self.take()
            if self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    self.fail(f"unknown function '{value}'", tok)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[value][1]
                if arity > 0 and len(args) != arity:
                    self.fail(f"'{value}' takes {arity} argument(s), got {len(args)}", tok)
                if arity < 0 and len(args) < -arity:
                    self.fail(f"'{value}' takes at least {-arity} arguments", tok)
                return Call(value, tuple(args))
            if value in CONSTANTS:
                return Const(value)
            if VARIABLE_RE.match(value):
                return Var(value)
            self.fail(f"unknown name '{value}'", tok)
        if value == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            self.fail("unexpected end of input")
        self.fail(f"unexpected token {value!r}")


def parse(text) -> Expr:
    """Parse ``text`` (a string or a number) into an expression tree.

    Raises ExpressionError with a 1-based column on malformed input.
    """
    if isinstance(text, Expr):
        return text
    if isinstance(text, bool):
        raise ExpressionError(f"expected an expression, got boolean {text!r}")
    if isinstance(text, (int, float, np.integer, np.floating)):
        return Num(float(text))
    if not isinstance(text, str):
        raise ExpressionError(f"expected an expression string, got {type(text).__name__}")
    return _Parser(text).parse()


def evaluate(expr: Expr, env, shape=None):
    """Evaluate and broadcast the result to ``shape`` as float64."""
    out = np.asarray(expr.evaluate(env), dtype=float)
    if shape is not None:
        out = np.broadcast_to(out, shape)
    return out


def add(*terms) -> Expr:
    """Sum of expressions (skips literal zeros)."""
    parts = [parse(t) for t in terms]
    parts = [p for p in parts if not (isinstance(p, Num) and p.value == 0.0)]
    if not parts:
        return Num(0.0)
    node = parts[0]
    for p in parts[1:]:
        node = BinOp("+", node, p)
    return node


def mul(*factors) -> Expr:
    parts = [parse(t) for t in factors]
    if any(isinstance(p, Num) and p.value == 0.0 for p in parts):
        return Num(0.0)
    parts = [p for p in parts if not (isinstance(p, Num) and p.value == 1.0)]
    if not parts:
        return Num(1.0)
    node = parts[0]
    for p in parts[1:]:
        node = BinOp("*", node, p)
    return node
