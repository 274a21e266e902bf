"""
Group-level transforms: group means and group-mean centering (cwc).

Scripts are plain data, written as

    groupmean(SES -> SES.mean); cwc(SES -> SES.cwc | ID)

The optional ``| name`` picks the grouping column; the dataset's group column
is used otherwise.
"""
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from mlmi_cli.exceptions import ParseError, ValidationError
from mlmi_cli.imputation.data_model import Dataset
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

OPERATIONS = ("groupmean", "cwc")

_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z][A-Za-z0-9._]*)|(?P<arrow>->)|(?P<op>[();|]))")


@dataclass(frozen=True)
class Transform:
    op: str
    var: str
    out: str
    group: Optional[str] = None

    def __str__(self):
        group = f" | {self.group}" if self.group else ""
        return f"{self.op}({self.var} -> {self.out}{group})"

    def apply(self, d: Dataset) -> Dataset:
        if self.op == "groupmean":
            return group_means(d, self.var, self.group or d.group_col, self.out)
        return center_within_group(d, self.var, self.group or d.group_col, self.out)


def _group_mean_values(d: Dataset, var: str, group: str, out: str) -> np.ndarray:
    d.require([var, group])
    if d.has_column(out):
        raise ValidationError(f"Output column '{out}' already exists")
    if not pd.api.types.is_numeric_dtype(d.frame[var]):
        raise ValidationError(f"Variable '{var}' is not numeric")
    keys = d.frame[group]
    if keys.isna().any():
        raise ValidationError(f"Grouping variable '{group}' has missing values")
    # NaN-skipping mean: a group with no observed value yields NaN
    return d.frame[var].groupby(keys, sort=False).transform("mean").to_numpy(dtype=float)


def group_means(d: Dataset, var: str, group: str, out: str) -> Dataset:
    return d.with_column(out, _group_mean_values(d, var, group, out))


def center_within_group(d: Dataset, var: str, group: str, out: str) -> Dataset:
    means = _group_mean_values(d, var, group, out)
    return d.with_column(out, d.column(var) - means)


def apply_script(d: Dataset, script: Sequence[Transform]) -> Dataset:
    for transform in script:
        d = transform.apply(d)
    return d


def apply_to_all(imps: Sequence[Dataset], script: Sequence[Transform]) -> List[Dataset]:
    """Run the script on every imputed dataset separately; means are never shared across datasets."""
    if not script:
        return list(imps)
    results = []
    for index, d in enumerate(imps, start=1):
        for transform in script:
            try:
                d = transform.apply(d)
            except ValidationError as e:
                raise ValidationError(f"Imputed data set {index}, transform '{transform}': {e}") from e
        results.append(d)
    logger.debug(f"Applied {len(script)} transform(s) to {len(results)} data set(s)")
    return results


def parse_script(text: str) -> List[Transform]:
    """Parse 'op(var -> out [| group]); ...'. An empty script is allowed."""
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

    i = 0

    def expect(kind, value=None):
        nonlocal i
        tok = tokens[i]
        if tok[0] != kind or (value is not None and tok[1] != value):
            wanted = f"'{value}'" if value else ("'->'" if kind == "arrow" else kind)
            found = f"'{tok[1]}'" if tok[1] else "end of script"
            raise ParseError(f"Expected {wanted}, found {found}", offset=tok[2])
        i += 1
        return tok

    script = []
    while tokens[i][0] != "end":
        if tokens[i][:2] == ("op", ";"):
            i += 1
            continue
        op = expect("name")
        if op[1] not in OPERATIONS:
            raise ParseError(f"Unknown transform '{op[1]}' (expected one of: {', '.join(OPERATIONS)})", offset=op[2])
        expect("op", "(")
        var = expect("name")
        expect("arrow")
        out = expect("name")
        group = None
        if tokens[i][:2] == ("op", "|"):
            i += 1
            group = expect("name")[1]
        expect("op", ")")
        if tokens[i][0] != "end":
            expect("op", ";")
        script.append(Transform(op=op[1], var=var[1], out=out[1], group=group))
    return script
