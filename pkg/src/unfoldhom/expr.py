"""Small arithmetic expression language for coefficient fields.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | '+' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Expressions evaluate on numpy arrays so that a whole batch of quadrature
points is handled by one call.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

FUNCTIONS = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "abs": (1, np.abs),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}
CONSTANTS = {"pi": math.pi}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


class ExpressionError(ValueError):
    """Raised for malformed expressions; ``position`` is a 0-based offset."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} at offset {position}"
        super().__init__(message)


@dataclass(frozen=True)
class Num:
    value: float

    def evaluate(self, env):
        return self.value

    def to_text(self):
        return repr(float(self.value))


@dataclass(frozen=True)
class Var:
    name: str

    def evaluate(self, env):
        return env[self.name]

    def to_text(self):
        return self.name


@dataclass(frozen=True)
class Neg:
    arg: object

    def evaluate(self, env):
        return -self.arg.evaluate(env)

    def to_text(self):
        return f"(-{self.arg.to_text()})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if self.op == "/":
            if np.any(np.asarray(b) == 0):
                raise ZeroDivisionError(f"division by zero in {self.to_text()}")
            return np.true_divide(a, b)
        return np.power(a, b)

    def to_text(self):
        return f"({self.left.to_text()} {self.op} {self.right.to_text()})"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple

    def evaluate(self, env):
        return FUNCTIONS[self.name][1](*(a.evaluate(env) for a in self.args))

    def to_text(self):
        return f"{self.name}({', '.join(a.to_text() for a in self.args)})"


class Expression:
    """A parsed expression together with its source text."""

    def __init__(self, tree, text):
        self.tree = tree
        self.text = text

    def __call__(self, **env):
        return self.tree.evaluate(env)

    def __repr__(self):
        return f"Expression({self.text!r})"

    @property
    def variables(self):
        found = set()
        stack = [self.tree]
        while stack:
            node = stack.pop()
            if isinstance(node, Var):
                found.add(node.name)
            elif isinstance(node, Neg):
                stack.append(node.arg)
            elif isinstance(node, BinOp):
                stack.extend((node.left, node.right))
            elif isinstance(node, Call):
                stack.extend(node.args)
        return frozenset(found)

    def depends_on(self, name):
        return name in self.variables

    def to_text(self):
        return self.tree.to_text()

    def evaluate(self, shape=None, **env):
        """Evaluate and broadcast the result to ``shape`` (constants included)."""
        value = np.asarray(self.tree.evaluate(env), dtype=float)
        if shape is None:
            shape = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
        return np.broadcast_to(value, shape).copy()


class _Parser:
    def __init__(self, text, variables):
        self.text = text
        self.variables = variables
        self.tokens = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            match = _TOKEN.match(text, pos)
            if match is None:
                bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
                raise ExpressionError(f"unexpected character {text[bad]!r}", bad)
            kind = match.lastgroup
            start = match.start(kind)
            self.tokens.append((kind, match.group(kind), start))
            pos = match.end()
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.advance()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ExpressionError(f"expected {value!r}, found {found}", pos)

    def parse(self):
        tree = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected {text!r}", pos)
        return tree

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.unary())
        if kind == "op" and text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, text, pos = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    raise ExpressionError(f"unknown function {text!r}", pos)
                self.advance()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.advance()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[text][0]
                if len(args) != arity:
                    raise ExpressionError(f"{text} takes {arity} argument(s), got {len(args)}", pos)
                return Call(text, tuple(args))
            if text in CONSTANTS:
                return Num(CONSTANTS[text])
            if text in FUNCTIONS:
                raise ExpressionError(f"function {text!r} needs arguments", pos)
            if self.variables is not None and text not in self.variables:
                raise ExpressionError(f"unknown identifier {text!r}", pos)
            return Var(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ExpressionError(f"unexpected {found}", pos)


def parse_expression(text, variables=("y1", "y2", "t")):
    """Parse ``text`` into an :class:`Expression`.

    ``variables`` lists the admissible free names; pass ``None`` to accept any.
    """
    allowed = None if variables is None else frozenset(variables)
    return Expression(_Parser(text, allowed).parse(), text)
