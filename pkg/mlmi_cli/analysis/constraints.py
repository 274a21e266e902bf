"""
Arithmetic constraints over named parameters, e.g. "SES.mean - SES.cwc".

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := ("+" | "-") factor | NUMBER | NAME | "(" expr ")"

NAME also accepts the literal "(Intercept)".
"""
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Tuple

import numpy as np

from mlmi_cli.exceptions import NumericalError, ParseError, UnknownParameterError

_TOKEN = re.compile(
    r"\s*(?:(?P<name>\(Intercept\)|[A-Za-z][A-Za-z0-9._]*)"
    r"|(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<op>[-+*/()]))"
)


@dataclass(frozen=True)
class Constraint:
    text: str
    names: Tuple[str, ...]
    evaluate: Callable[[Mapping[str, float]], float]

    def bind(self, available: Sequence[str]) -> None:
        unknown = [n for n in self.names if n not in available]
        if unknown:
            raise UnknownParameterError(f"Constraint '{self.text}' references unknown parameter(s): {', '.join(unknown)}")

    def __str__(self):
        return self.text


def _tokenize(text: str):
    tokens = []
    pos = 0
    end = len(text.rstrip())
    while pos < end:
        match = _TOKEN.match(text, pos)
        if not match:
            offset = len(text) - len(text[pos:].lstrip())
            raise ParseError(f"Unexpected character '{text[offset]}'", offset=offset)
        kind = match.lastgroup
        tokens.append((kind, match.group(kind), match.start(kind)))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


def _divide(a: float, b: float) -> float:
    if b == 0.0:
        raise NumericalError("Division by zero in constraint")
    return a / b


_BINARY = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b, "/": _divide}


def _apply(op, left, right):
    return lambda v: op(left(v), right(v))


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0
        self.names = []

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expr(self):
        node = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = _BINARY[self.take()[1]]
            node = _apply(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = _BINARY[self.take()[1]]
            node = _apply(op, node, self.factor())
        return node

    def factor(self):
        kind, value, offset = self.take()
        if kind == "op" and value in "+-":
            inner = self.factor()
            return inner if value == "+" else _apply(_BINARY["-"], lambda v: 0.0, inner)
        if kind == "number":
            constant = float(value)
            return lambda v: constant
        if kind == "name":
            if value not in self.names:
                self.names.append(value)
            return lambda v: float(v[value])
        if kind == "op" and value == "(":
            node = self.expr()
            kind, value, offset = self.take()
            if (kind, value) != ("op", ")"):
                raise ParseError(f"Expected ')', found {repr(value) if value else 'end of expression'}", offset=offset)
            return node
        found = f"'{value}'" if value else "end of expression"
        raise ParseError(f"Expected a number, name or '(', found {found}", offset=offset)

    def parse(self) -> Callable:
        node = self.expr()
        kind, value, offset = self.peek()
        if kind != "end":
            raise ParseError(f"Unexpected '{value}'", offset=offset)
        return node


def parse_constraint(text: str) -> Constraint:
    if not text or not text.strip():
        raise ParseError("Constraint is empty", offset=0)
    parser = _Parser(text)
    evaluate = parser.parse()
    return Constraint(text=text.strip(), names=tuple(parser.names), evaluate=evaluate)


def gradient(constraint: Constraint, names: Sequence[str], theta: np.ndarray) -> np.ndarray:
    """Central differences, step 1e-6 * max(1, |theta_i|)."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros(theta.shape[0])
    for i, name in enumerate(names):
        if name not in constraint.names:
            continue
        h = 1e-6 * max(1.0, abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (constraint.evaluate(dict(zip(names, up))) - constraint.evaluate(dict(zip(names, down)))) / (2.0 * h)
    return grad


def delta_method(estimates, vcov, constraint, names: Sequence[str]) -> Tuple[float, float]:
    """(g(theta), grad' V grad) for a constraint g over the named parameters."""
    if isinstance(constraint, str):
        constraint = parse_constraint(constraint)
    constraint.bind(names)
    theta = np.asarray(estimates, dtype=float)
    vcov = np.asarray(vcov, dtype=float)
    value = constraint.evaluate(dict(zip(names, theta)))
    g = gradient(constraint, names, theta)
    return float(value), float(g @ vcov @ g)
