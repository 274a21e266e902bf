"""
Model formulas for imputation and analysis models.

Grammar (whitespace-insensitive):

    formula  := lhs "~" rhs
    lhs      := NAME ("+" NAME)*
    rhs      := term ("+" term)*
    term     := "1" | NAME | "(" "1" ("+" NAME)* "|" NAME ")"

NAME starts with a letter and continues with letters, digits, "." or "_".
The intercept is only present when "1" is written.
"""
import re
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from mlmi_cli.exceptions import ParseError, ValidationError
from mlmi_cli.imputation.data_model import Dataset, GroupIndex, group_index

INTERCEPT = "(Intercept)"

_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z][A-Za-z0-9._]*)|(?P<number>\d+(?:\.\d*)?)|(?P<op>[~+|()]))")


@dataclass(frozen=True)
class ModelFormula:
    responses: Tuple[str, ...]
    fixed_intercept: bool
    fixed_vars: Tuple[str, ...]
    random_intercept: bool = False
    random_vars: Tuple[str, ...] = ()
    group: Optional[str] = None

    @property
    def has_random(self) -> bool:
        return self.group is not None

    @property
    def fixed_names(self) -> Tuple[str, ...]:
        return ((INTERCEPT,) if self.fixed_intercept else ()) + self.fixed_vars

    @property
    def random_names(self) -> Tuple[str, ...]:
        if not self.has_random:
            return ()
        return ((INTERCEPT,) if self.random_intercept else ()) + self.random_vars

    @property
    def variables(self) -> Tuple[str, ...]:
        names = list(self.responses) + list(self.fixed_vars)
        names += [v for v in self.random_vars if v not in names]
        if self.group:
            names.append(self.group)
        return tuple(names)

    def canonical(self) -> str:
        terms = (["1"] if self.fixed_intercept else []) + list(self.fixed_vars)
        if self.has_random:
            inner = " + ".join((["1"] if self.random_intercept else []) + list(self.random_vars))
            terms.append(f"({inner} | {self.group})")
        return f"{' + '.join(self.responses)} ~ {' + '.join(terms)}"

    def __str__(self):
        return self.canonical()


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Numeric matrices for one formula on one dataset. Y keeps NaN at missing cells."""

    Y: np.ndarray
    missing: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    groups: GroupIndex
    response_names: Tuple[str, ...]
    fixed_names: Tuple[str, ...]
    random_names: Tuple[str, ...]

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def r(self) -> int:
        return self.Y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    stripped_end = len(text.rstrip())
    while pos < stripped_end:
        match = _TOKEN.match(text, pos)
        if not match or match.end() == pos:
            offset = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ParseError(f"Unexpected character '{text[offset]}'", offset=offset)
        kind = match.lastgroup
        value = match.group(kind)
        tokens.append((kind, value, match.start(kind)))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, value: str = None):
        tok = self.take()
        if tok[0] != kind or (value is not None and tok[1] != value):
            wanted = f"'{value}'" if value else kind
            found = f"'{tok[1]}'" if tok[1] else "end of formula"
            raise ParseError(f"Expected {wanted}, found {found}", offset=tok[2])
        return tok

    def at(self, kind: str, value: str = None) -> bool:
        tok = self.peek()
        return tok[0] == kind and (value is None or tok[1] == value)

    def intercept(self):
        tok = self.expect("number")
        if tok[1] != "1":
            raise ParseError(f"Only '1' (intercept) is allowed as a numeric term, found '{tok[1]}'", offset=tok[2])

    def random_block(self):
        open_tok = self.expect("op", "(")
        self.intercept()
        names = []
        while self.at("op", "+"):
            self.take()
            names.append(self.expect("name"))
        self.expect("op", "|")
        group = self.expect("name")
        self.expect("op", ")")
        return open_tok, names, group

    def parse(self) -> ModelFormula:
        responses = []
        if not self.at("name"):
            tok = self.peek()
            raise ParseError("Formula needs at least one response before '~'", offset=tok[2])
        responses.append(self.take())
        while self.at("op", "+"):
            self.take()
            responses.append(self.expect("name"))
        self.expect("op", "~")

        fixed_intercept = False
        fixed = []
        blocks = []
        while True:
            tok = self.peek()
            if tok[0] == "number":
                self.intercept()
                if fixed_intercept:
                    raise ParseError("Duplicate intercept term", offset=tok[2])
                fixed_intercept = True
            elif tok[0] == "name":
                fixed.append(self.take())
            elif tok[0] == "op" and tok[1] == "(":
                blocks.append(self.random_block())
            else:
                found = f"'{tok[1]}'" if tok[1] else "end of formula"
                raise ParseError(f"Expected a term, found {found}", offset=tok[2])
            if self.at("op", "+"):
                self.take()
                continue
            break
        self.expect("end")
        return _assemble(responses, fixed_intercept, fixed, blocks)


def _assemble(responses, fixed_intercept, fixed, blocks) -> ModelFormula:
    seen = set()
    for _, name, offset in responses:
        if name in seen:
            raise ParseError(f"Duplicate response '{name}'", offset=offset)
        seen.add(name)
    response_names = tuple(name for _, name, _ in responses)

    fixed_names = []
    for _, name, offset in fixed:
        if name in response_names:
            raise ParseError(f"Variable '{name}' appears on both sides of '~'", offset=offset)
        if name in fixed_names:
            raise ParseError(f"Duplicate term '{name}'", offset=offset)
        fixed_names.append(name)

    if len(blocks) > 1:
        raise ParseError("Only one random-effects block is supported", offset=blocks[1][0][2])

    random_vars = ()
    group = None
    if blocks:
        _, names, group_tok = blocks[0]
        random_list = []
        for _, name, offset in names:
            if name not in fixed_names:
                raise ParseError(f"Random term '{name}' must also be a fixed term", offset=offset)
            if name in random_list:
                raise ParseError(f"Duplicate random term '{name}'", offset=offset)
            random_list.append(name)
        random_vars = tuple(random_list)
        group = group_tok[1]
        if group in response_names or group in fixed_names:
            raise ParseError(f"Grouping variable '{group}' cannot also be a model variable", offset=group_tok[2])

    if not fixed_intercept and not fixed_names:
        raise ValidationError("Right-hand side has no terms")

    return ModelFormula(
        responses=response_names,
        fixed_intercept=fixed_intercept,
        fixed_vars=tuple(fixed_names),
        random_intercept=bool(blocks),
        random_vars=random_vars,
        group=group,
    )


def parse_formula(text: str) -> ModelFormula:
    if not text or not text.strip():
        raise ParseError("Formula is empty", offset=0)
    return _Parser(text).parse()


def _predictor_columns(d: Dataset, names) -> np.ndarray:
    cols = []
    for name in names:
        if name == INTERCEPT:
            cols.append(np.ones(d.n_rows))
            continue
        values = d.column(name)
        if np.isnan(values).any():
            raise ValidationError(
                f"Predictor '{name}' has {int(np.isnan(values).sum())} missing value(s); "
                "variables on the right-hand side must be completely observed"
            )
        cols.append(values)
    if not cols:
        return np.zeros((d.n_rows, 0))
    return np.column_stack(cols)


def build_design(f: ModelFormula, d: Dataset, single_level: bool = False) -> DesignMatrices:
    """
    Assemble Y, X, Z in declaration order.

    single_level=True builds the flat design: every row in one group and no
    random effects (q = 0).
    """
    d.require([v for v in f.variables])
    Y = d.values(f.responses)
    X = _predictor_columns(d, f.fixed_names)

    if single_level:
        n = d.n_rows
        groups = GroupIndex(labels=("all",), codes=np.zeros(n, dtype=np.int64), rows=(np.arange(n),), sizes=np.array([n]))
        Z = np.zeros((n, 0))
        random_names = ()
    else:
        if not f.has_random:
            raise ValidationError("Formula has no random-effects block '( 1 | group )'")
        groups = group_index(d, by=f.group)
        Z = _predictor_columns(d, f.random_names)
        random_names = f.random_names

    return DesignMatrices(
        Y=Y,
        missing=np.isnan(Y),
        X=X,
        Z=Z,
        groups=groups,
        response_names=f.responses,
        fixed_names=f.fixed_names,
        random_names=random_names,
    )
