"""
Two-level datasets with missing values.

A Dataset wraps a pandas DataFrame with one designated group column. Missing
cells are NaN and only ever come from the missing tokens ("NA" or an empty
field), so NaN never collides with a data value.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse

from mlmi_cli.exceptions import ParseError, ValidationError
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

MISSING_TOKENS = frozenset({"NA", ""})

Source = Union[str, Path, TextIO]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rectangular numeric table plus a group identifier column. Read-only by convention."""

    frame: pd.DataFrame
    group_col: str

    def __post_init__(self):
        names = list(self.frame.columns)
        if self.frame.shape[0] < 1:
            raise ValidationError("Dataset must have at least one row")
        if any(not isinstance(n, str) or not n.strip() for n in names):
            raise ValidationError("Column names must be nonempty strings")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"Duplicate column names: {', '.join(dupes)}")
        if self.group_col not in names:
            raise ValidationError(f"Group column '{self.group_col}' not found")
        if self.frame[self.group_col].isna().any():
            row = int(np.flatnonzero(self.frame[self.group_col].isna().to_numpy())[0])
            raise ValidationError(f"Group column '{self.group_col}' has a missing value at data row {row + 1}")

    @property
    def n_rows(self) -> int:
        return int(self.frame.shape[0])

    @property
    def columns(self) -> Tuple[str, ...]:
        return tuple(self.frame.columns)

    @property
    def variables(self) -> Tuple[str, ...]:
        """All columns except the group identifier."""
        return tuple(c for c in self.frame.columns if c != self.group_col)

    def has_column(self, name: str) -> bool:
        return name in self.frame.columns

    def require(self, names: Sequence[str]) -> None:
        missing = [n for n in names if n not in self.frame.columns]
        if missing:
            raise ValidationError(f"Unknown variable(s): {', '.join(missing)}")

    def column(self, name: str) -> np.ndarray:
        self.require([name])
        return self.frame[name].to_numpy(dtype=float, copy=True)

    def values(self, names: Sequence[str]) -> np.ndarray:
        """N x len(names) float matrix, NaN where missing."""
        self.require(names)
        return self.frame[list(names)].to_numpy(dtype=float, copy=True)

    def is_complete(self, names: Sequence[str]) -> bool:
        self.require(names)
        return not self.frame[list(names)].isna().to_numpy().any()

    def with_column(self, name: str, values) -> "Dataset":
        frame = self.frame.copy()
        frame[name] = np.asarray(values, dtype=float)
        return Dataset(frame, self.group_col)

    def with_values(self, names: Sequence[str], matrix: np.ndarray) -> "Dataset":
        """Copy of the dataset with the given columns replaced by the columns of matrix."""
        frame = self.frame.copy()
        for k, name in enumerate(names):
            frame[name] = matrix[:, k]
        return Dataset(frame, self.group_col)

    def missing_mask(self, names: Sequence[str] = None) -> "MissingMask":
        names = list(names) if names is not None else list(self.columns)
        self.require(names)
        values = self.frame[names].isna().to_numpy()
        return MissingMask(values=values, columns=tuple(names))

    def equals(self, other: "Dataset") -> bool:
        return self.group_col == other.group_col and self.frame.equals(other.frame)


@dataclass(frozen=True, eq=False)
class MissingMask:
    """N x V booleans, True = missing."""

    values: np.ndarray
    columns: Tuple[str, ...]

    @property
    def shape(self):
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


@dataclass(frozen=True)
class PatternRow:
    observed: Tuple[bool, ...]
    count: int
    rel_pct: float
    cum_pct: float


@dataclass(frozen=True)
class PatternTable:
    """Distinct missing-data patterns, most frequent first. Percentages are fractions."""

    variables: Tuple[str, ...]
    rows: Tuple[PatternRow, ...]
    n_rows: int
    n_patterns: int


@dataclass(frozen=True, eq=False)
class GroupIndex:
    labels: Tuple
    codes: np.ndarray
    rows: Tuple[np.ndarray, ...]
    sizes: np.ndarray

    @property
    def J(self) -> int:
        return len(self.labels)

    @property
    def n_rows(self) -> int:
        return int(self.codes.shape[0])

    def indicator(self) -> sparse.csr_matrix:
        """J x N sparse 0/1 matrix; indicator() @ values gives per-group sums."""
        n = self.n_rows
        return sparse.csr_matrix((np.ones(n), (self.codes, np.arange(n))), shape=(self.J, n))


@dataclass(frozen=True, eq=False)
class CorrelationTable:
    variables: Tuple[str, ...]
    matrix: np.ndarray
    n_pairs: np.ndarray
    missing_pct: np.ndarray

    def value(self, a: str, b: str) -> Optional[float]:
        """Pearson r for the pair, or None when undefined."""
        r = self.matrix[self.variables.index(a), self.variables.index(b)]
        return None if np.isnan(r) else float(r)

    def is_defined(self, a: str, b: str) -> bool:
        return self.value(a, b) is not None


# --- I/O ---


def _read_text_frame(source: Source, sep: str) -> pd.DataFrame:
    # header=None: pandas would otherwise rename duplicate names to 'x.1'
    try:
        raw = pd.read_csv(source, sep=sep, header=None, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise ValidationError("Input has no header row") from e
    except pd.errors.ParserError as e:
        raise ParseError(f"Malformed delimited text: {e}") from e
    header = [str(name).strip() for name in raw.iloc[0]]
    dupes = sorted({name for name in header if header.count(name) > 1})
    if dupes:
        raise ValidationError(f"Duplicate column names: {', '.join(dupes)}")
    frame = raw.iloc[1:].reset_index(drop=True)
    frame.columns = header
    return frame


def _parse_numeric(raw: pd.Series, name: str) -> np.ndarray:
    tokens = raw.str.strip()
    is_missing = tokens.isin(MISSING_TOKENS).to_numpy()
    parsed = pd.to_numeric(tokens.where(~is_missing, None), errors="coerce").to_numpy(dtype=float)
    bad = (~is_missing) & ~np.isfinite(parsed)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        # +2: header line plus 1-based numbering
        raise ParseError(f"Malformed numeric cell '{raw.iloc[i]}'", row=i + 2, column=name)
    return np.where(is_missing, np.nan, parsed)


def load_dataset(source: Source, group_col: str, columns: Sequence[str] = None, sep: str = ",") -> Dataset:
    """
    Parse delimited text into a Dataset.

    ``columns`` optionally restricts (and orders) the columns that are kept.
    Errors name the file line (header = line 1) and column.
    """
    raw = _read_text_frame(source, sep)
    if group_col not in raw.columns:
        raise ValidationError(f"Group column '{group_col}' not found in header")
    if columns is not None:
        wanted = list(columns)
        if group_col not in wanted:
            wanted = [group_col] + wanted
        unknown = [c for c in wanted if c not in raw.columns]
        if unknown:
            raise ValidationError(f"Columns not found in header: {', '.join(unknown)}")
        raw = raw[wanted]

    frame = pd.DataFrame(index=raw.index)
    for name in raw.columns:
        if name == group_col:
            groups = raw[name].str.strip()
            empty = groups.isin(MISSING_TOKENS).to_numpy()
            if empty.any():
                i = int(np.flatnonzero(empty)[0])
                raise ValidationError(f"Missing group value in column '{group_col}' at row {i + 2}")
            frame[name] = groups
        else:
            frame[name] = _parse_numeric(raw[name], name)

    dataset = Dataset(frame.reset_index(drop=True), group_col)
    logger.debug(f"Loaded {dataset.n_rows} rows x {len(dataset.columns)} columns")
    return dataset


def write_dataset(d: Dataset, target: Source, sep: str = ",") -> None:
    """Inverse of load_dataset: 'NA' for missing cells, shortest round-trip float repr."""
    d.frame.to_csv(target, sep=sep, index=False, na_rep="NA", lineterminator="\n")


# --- Summaries ---


def group_index(d: Dataset, by: str = None) -> GroupIndex:
    """Densify group labels to 0..J-1 in order of first appearance."""
    by = by or d.group_col
    d.require([by])
    series = d.frame[by]
    if series.isna().any():
        raise ValidationError(f"Grouping variable '{by}' has missing values")
    codes, uniques = pd.factorize(series, sort=False)
    codes = codes.astype(np.int64)
    J = len(uniques)
    order = np.argsort(codes, kind="stable")
    sizes = np.bincount(codes, minlength=J)
    rows = tuple(np.split(order, np.cumsum(sizes)[:-1]))
    return GroupIndex(labels=tuple(uniques.tolist()), codes=codes, rows=rows, sizes=sizes)


def pattern_summary(d: Dataset, min_cum_pct: float = 1.0, columns: Sequence[str] = None) -> PatternTable:
    """
    Row-wise missingness patterns sorted by count (descending), ties broken by
    the missing-indicator vector in lexicographic order. The table stops at the
    first pattern whose inclusion brings the cumulative share to min_cum_pct.
    """
    variables = tuple(columns) if columns is not None else d.variables
    mask = d.missing_mask(variables).values.astype(np.int8)
    n = d.n_rows

    patterns, counts = np.unique(mask, axis=0, return_counts=True)
    order = sorted(range(len(counts)), key=lambda k: (-int(counts[k]), tuple(patterns[k])))

    rows = []
    cum = 0
    for k in order:
        cum += int(counts[k])
        rows.append(
            PatternRow(
                observed=tuple(bool(flag == 0) for flag in patterns[k]),
                count=int(counts[k]),
                rel_pct=counts[k] / n,
                cum_pct=cum / n,
            )
        )
        if cum >= min_cum_pct * n - 1e-9:
            break

    return PatternTable(variables=variables, rows=tuple(rows), n_rows=n, n_patterns=len(counts))


def pairwise_correlations(d: Dataset, columns: Sequence[str] = None) -> CorrelationTable:
    """Pearson correlations over pairwise-complete rows, plus missing share per variable."""
    variables = tuple(columns) if columns is not None else d.variables
    if len(variables) < 2:
        raise ValidationError("Correlations need at least two numeric variables")
    frame = d.frame[list(variables)].astype(float)

    matrix = frame.corr(method="pearson", min_periods=2).to_numpy()
    matrix = np.clip(matrix, -1.0, 1.0)
    observed = frame.notna().to_numpy().astype(np.int64)
    n_pairs = observed.T @ observed
    missing_pct = 1.0 - observed.mean(axis=0)

    return CorrelationTable(variables=variables, matrix=matrix, n_pairs=n_pairs, missing_pct=missing_pct)
