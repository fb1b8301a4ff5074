"""Small arithmetic language for derived counter metrics.

Grammar (left-associative, ``* /`` bind tighter than ``+ -``)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | atom
    atom   := NUMBER | NAME | "(" expr ")"

``NAME`` is a counter name matched exactly, or the literal ``dur_s`` for the
kernel duration in seconds. ``×`` and ``÷`` are accepted as operator aliases.
Evaluation works on floats or on numpy arrays of equal length.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import DivisionByZero, MissingCounter, ParseError

DURATION = "dur_s"

_TOKEN = re.compile(r"""
    \s*(?:
      (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
     |(?P<name>[A-Za-z_][A-Za-z0-9_.]*)
     |(?P<op>[-+*/()×÷])
    )""", re.VERBOSE)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Name:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Num, Name, Neg, BinOp]


def _tokenize(text: str) -> list[tuple[str, str]]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos:pos + 1]!r} at {pos} in {text!r}")
        kind = m.lastgroup
        val = m.group(kind)
        if kind == "op":
            val = {"×": "*", "÷": "/"}.get(val, val)
        out.append((kind, val))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self) -> Node:
        if not self.toks:
            raise ParseError("empty expression")
        node = self.expr()
        if self.i != len(self.toks):
            raise ParseError(f"trailing input {self.toks[self.i][1]!r} in {self.text!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            node = BinOp(self.take()[1], node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek() in (("op", "*"), ("op", "/")):
            node = BinOp(self.take()[1], node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek() == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Node:
        kind, val = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            return Name(val)
        if (kind, val) == ("op", "("):
            node = self.expr()
            if self.take() != ("op", ")"):
                raise ParseError(f"missing ')' in {self.text!r}")
            return node
        raise ParseError(f"unexpected {val!r} in {self.text!r}")


class MetricExpr:
    """A parsed derived-metric expression.

    >>> MetricExpr("X / Y").evaluate({"X": 10.0, "Y": 4.0})
    2.5
    """

    def __init__(self, text: str):
        self.text = text
        self.tree = _Parser(text).parse()
        self.names = frozenset(_names(self.tree))

    def __repr__(self) -> str:
        return f"MetricExpr({self.text!r})"

    def evaluate(self, env: Mapping[str, object]):
        missing = sorted(n for n in self.names if n not in env)
        if missing:
            raise MissingCounter(missing[0])
        return _eval(self.tree, env)

    def evaluate_array(self, env: Mapping[str, np.ndarray]) -> np.ndarray:
        """Elementwise evaluation that marks undefined entries instead of raising.

        Rows with a zero denominator or a NaN operand come back as NaN, so a
        single bad kernel cannot sink a whole column.
        """
        missing = sorted(n for n in self.names if n not in env)
        if missing:
            raise MissingCounter(missing[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.asarray(_eval(self.tree, env, strict=False), dtype=float)
        # constant sub-expressions stay scalar; stretch them to the row count
        shape = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, shape)).copy()


def _names(node: Node):
    if isinstance(node, Name):
        yield node.name
    elif isinstance(node, Neg):
        yield from _names(node.operand)
    elif isinstance(node, BinOp):
        yield from _names(node.left)
        yield from _names(node.right)


def _eval(node: Node, env, strict: bool = True):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        return env[node.name]
    if isinstance(node, Neg):
        return -_eval(node.operand, env, strict)
    a = _eval(node.left, env, strict)
    b = _eval(node.right, env, strict)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if not strict:
        zero = np.asarray(b) == 0
        return np.where(zero, np.nan, np.asarray(a, dtype=float) / np.where(zero, 1.0, b))
    if np.any(np.asarray(b) == 0):
        raise DivisionByZero(f"division by zero in {node!r}")
    return a / b


def parse_registry(mapping: Mapping[str, str]) -> dict[str, MetricExpr]:
    """Parse a ``metric_name -> expression`` registry, failing on the first bad entry."""
    out = {}
    for name, text in mapping.items():
        try:
            out[name] = MetricExpr(text)
        except ParseError as e:
            raise ParseError(f"metric {name!r}: {e}") from e
    return out


DEFAULT_REGISTRY = {
    "mfma_util": "MFMA_BUSY_CYCLES / GPU_CYCLES",
    "achieved_flops": "MFMA_FLOPS / dur_s",
}
