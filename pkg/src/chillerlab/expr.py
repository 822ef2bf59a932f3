"""Arithmetic expression trees used by facility constraints.

Grammar (whitespace insensitive)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | atom
    atom    := NUMBER | NAME | ("min" | "max") "(" expr ("," expr)+ ")" | "(" expr ")"

``NAME`` is ``[A-Za-z_][A-Za-z0-9_]*`` and refers to a sensor or an action
dimension. A leading minus on a number folds into a negative constant; on
anything else it becomes ``0 - x``. ``format_expr`` prints the canonical form
and ``parse_expr(format_expr(e)) == e`` for every tree.

Evaluation works on scalars or numpy arrays so the same tree can prune a whole
batch of candidate actions at once.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np


class ExpressionError(ValueError):
    """Raised for malformed expressions and failed evaluations."""


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str  # min or max
    args: tuple["Expr", ...]


Expr = Union[Const, Ref, BinOp, Call]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/(),]))"
)
_FUNCS = ("min", "max")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExpressionError(f"unexpected character {text[col]!r} at column {col + 1}")
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, value=None):
        tok = self.tokens[self.i]
        if value is not None and tok[1] != value:
            found = tok[1] or "end of input"
            raise ExpressionError(f"expected {value!r} at column {tok[2] + 1}, found {found!r}")
        self.i += 1
        return tok

    def parse(self) -> Expr:
        node = self.expr()
        kind, val, col = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected {val!r} at column {col + 1}")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            if self.peek()[0] == "num":
                return Const(-float(self.take()[1]))
            return BinOp("-", Const(0.0), self.unary())
        return self.atom()

    def atom(self) -> Expr:
        kind, val, col = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            if val in _FUNCS and self.peek()[1] == "(":
                self.take("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take(",")
                    args.append(self.expr())
                self.take(")")
                if len(args) < 2:
                    raise ExpressionError(f"{val}() needs at least two arguments (column {col + 1})")
                return Call(val, tuple(args))
            return Ref(val)
        if val == "(":
            node = self.expr()
            self.take(")")
            return node
        raise ExpressionError(f"unexpected {val or 'end of input'!r} at column {col + 1}")


def parse_expr(text: str) -> Expr:
    return _Parser(str(text)).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def format_expr(node: Expr, _parent_prec: int = 0, _right: bool = False) -> str:
    """Canonical infix text with the minimum parentheses needed."""
    if isinstance(node, Const):
        s = _fmt_num(node.value)
        # a negative constant prints as "-3"; wrap when it would glue onto an operator
        return f"({s})" if node.value < 0 and _parent_prec > 0 else s
    if isinstance(node, Ref):
        return node.name
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(format_expr(a) for a in node.args)})"
    prec = _PREC[node.op]
    left = format_expr(node.left, prec, False)
    right = format_expr(node.right, prec, True)
    s = f"{left} {node.op} {right}"
    if prec < _parent_prec or (_right and prec == _parent_prec):
        s = f"({s})"
    return s


def refs(node: Expr) -> set[str]:
    if isinstance(node, Ref):
        return {node.name}
    if isinstance(node, Const):
        return set()
    if isinstance(node, BinOp):
        return refs(node.left) | refs(node.right)
    out: set[str] = set()
    for a in node.args:
        out |= refs(a)
    return out


def evaluate(node: Expr, env: Mapping[str, object]):
    """Evaluate ``node`` against ``env`` (scalars or broadcastable arrays)."""
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Ref):
        try:
            return env[node.name]
        except KeyError:
            raise ExpressionError(f"unbound identifier {node.name!r}") from None
    if isinstance(node, Call):
        vals = [evaluate(a, env) for a in node.args]
        fn = np.minimum if node.fn == "min" else np.maximum
        out = vals[0]
        for v in vals[1:]:
            out = fn(out, v)
        return out
    a = evaluate(node.left, env)
    b = evaluate(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if np.any(np.asarray(b) == 0):
        raise ExpressionError(f"division by zero in ({format_expr(node)})")
    return a / b
