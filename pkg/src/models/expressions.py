"""
Feature expressions: the small arithmetic language used by model files to write
rates that depend on the current distribution p.

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := base ('^' integer)?
    base   := number | 'p(' int ',' int ')' | 'tail(' int ')' | 'mean()' | '(' expr ')'
"""

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Set, Tuple, Union

import numpy as np

from src.config import get_settings
from src.errors import ExpressionSyntaxError, LayoutError, UnknownFeatureError
from src.state_space import LevelPhaseLayout, ProbabilityVector, flatten_index, mean_level, tail_masses


TOKEN_PATTERN = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)

FEATURES = ("p", "tail", "mean")


class FeatureContext:
    """Per-distribution cache of the features an expression may read."""

    def __init__(self, p: ProbabilityVector) -> None:
        self.p = p

    @cached_property
    def tails(self) -> np.ndarray:
        return tail_masses(self.p)

    @cached_property
    def mean(self) -> float:
        return mean_level(self.p)

    def component(self, level: int, phase: int) -> float:
        return float(self.p.values[flatten_index(self.p.layout, (level, phase))])

    def tail(self, k: int) -> float:
        L = self.p.layout.truncation_level
        if not 0 <= k <= L + 1:
            raise LayoutError(f"tail({k}) outside 0..{L + 1}")
        return float(self.tails[k])


@dataclass(frozen=True)
class Number:
    value: float

    def evaluate(self, ctx: FeatureContext) -> float:
        return self.value

    def __str__(self) -> str:
        return repr(self.value)


@dataclass(frozen=True)
class Component:
    level: int
    phase: int

    def evaluate(self, ctx: FeatureContext) -> float:
        return ctx.component(self.level, self.phase)

    def __str__(self) -> str:
        return f"p({self.level},{self.phase})"


@dataclass(frozen=True)
class Tail:
    k: int

    def evaluate(self, ctx: FeatureContext) -> float:
        return ctx.tail(self.k)

    def __str__(self) -> str:
        return f"tail({self.k})"


@dataclass(frozen=True)
class Mean:
    def evaluate(self, ctx: FeatureContext) -> float:
        return ctx.mean

    def __str__(self) -> str:
        return "mean()"


@dataclass(frozen=True)
class Power:
    base: "Node"
    exponent: int

    def evaluate(self, ctx: FeatureContext) -> float:
        return self.base.evaluate(ctx) ** self.exponent

    def __str__(self) -> str:
        return f"({self.base})^{self.exponent}"


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: "Node"
    right: "Node"
    eps_div: float = 1e-9

    def evaluate(self, ctx: FeatureContext) -> float:
        a = self.left.evaluate(ctx)
        b = self.right.evaluate(ctx)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        # |denominator| floored at eps_div, sign kept
        if abs(b) < self.eps_div:
            b = math.copysign(self.eps_div, b)
        return a / b

    def __str__(self) -> str:
        return f"({self.left} {self.op} {self.right})"


Node = Union[Number, Component, Tail, Mean, Power, BinaryOp]


@dataclass(frozen=True)
class FeatureExpression:
    text: str
    root: Node

    def evaluate(self, p: Union[ProbabilityVector, FeatureContext]) -> float:
        ctx = p if isinstance(p, FeatureContext) else FeatureContext(p)
        return float(self.root.evaluate(ctx))

    @property
    def is_constant(self) -> bool:
        return not self.features()

    def features(self) -> Set[str]:
        found: Set[str] = set()

        def walk(node: Node) -> None:
            if isinstance(node, Component):
                found.add(str(node))
            elif isinstance(node, (Tail, Mean)):
                found.add(str(node))
            elif isinstance(node, Power):
                walk(node.base)
            elif isinstance(node, BinaryOp):
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return found

    def check_layout(self, layout: LevelPhaseLayout) -> None:
        """Reject feature references that fall outside the layout."""

        def walk(node: Node) -> None:
            if isinstance(node, Component):
                flatten_index(layout, (node.level, node.phase))
            elif isinstance(node, Tail) and not 0 <= node.k <= layout.truncation_level + 1:
                raise LayoutError(f"tail({node.k}) outside 0..{layout.truncation_level + 1}")
            elif isinstance(node, Power):
                walk(node.base)
            elif isinstance(node, BinaryOp):
                walk(node.left)
                walk(node.right)

        walk(self.root)

    def __str__(self) -> str:
        return self.text


Token = Tuple[str, str, int]


def _tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    pos = 0
    stripped_end = len(text.rstrip())
    while pos < stripped_end:
        match = TOKEN_PATTERN.match(text, pos)
        if not match or match.end() == pos:
            raise ExpressionSyntaxError("Unexpected character", text, pos)
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append((kind, match.group(kind), start))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, eps_div: float) -> None:
        self.text = text
        self.tokens = _tokenize(text)
        self.index = 0
        self.eps_div = eps_div

    def peek(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def expect(self, value: str) -> Token:
        token = self.advance()
        if token[1] != value:
            raise ExpressionSyntaxError(f"Expected {value!r}, found {token[1] or 'end of input'!r}", self.text, token[2])
        return token

    def integer(self) -> int:
        kind, value, pos = self.advance()
        if kind != "number" or not value.isdigit():
            raise ExpressionSyntaxError("Expected a nonnegative integer", self.text, pos)
        return int(value)

    def parse(self) -> Node:
        node = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"Unexpected {value!r}", self.text, pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.advance()[1]
            node = BinaryOp(op, node, self.term(), self.eps_div)
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.advance()[1]
            node = BinaryOp(op, node, self.factor(), self.eps_div)
        return node

    def factor(self) -> Node:
        node = self.base()
        if self.peek()[1] == "^":
            self.advance()
            node = Power(node, self.integer())
        return node

    def base(self) -> Node:
        kind, value, pos = self.advance()
        if kind == "number":
            return Number(float(value))
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if value not in FEATURES:
                raise UnknownFeatureError(f"Unknown feature {value!r} at position {pos} in {self.text!r}")
            self.expect("(")
            if value == "p":
                level = self.integer()
                self.expect(",")
                phase = self.integer()
                self.expect(")")
                return Component(level, phase)
            if value == "tail":
                k = self.integer()
                self.expect(")")
                return Tail(k)
            self.expect(")")
            return Mean()
        raise ExpressionSyntaxError(f"Unexpected {value or 'end of input'!r}", self.text, pos)


def parse_expression(text: str, layout: Optional[LevelPhaseLayout] = None, eps_div: Optional[float] = None) -> FeatureExpression:
    if not isinstance(text, str):
        text = repr(text)
    guard = eps_div if eps_div is not None else get_settings().eps_div
    expression = FeatureExpression(text=text, root=_Parser(text, guard).parse())
    if layout is not None:
        expression.check_layout(layout)
    return expression

