from mlmi_cli.imputation.data_model import CorrelationTable, PatternTable
from mlmi_cli.utils.common import format_number, format_percent

OBSERVED = "o"
MISSING = "x"


def get_pattern_rows(table: PatternTable):
    """
    Rows of the missing-data pattern table, most frequent pattern first.
    Used by the 'patterns' command.
    """
    headers = ["Pattern"] + list(table.variables) + ["Count", "Rel.", "Cum."]
    rows = []
    for number, row in enumerate(table.rows, start=1):
        flags = [OBSERVED if seen else MISSING for seen in row.observed]
        rows.append([number] + flags + [row.count, format_percent(row.rel_pct), format_percent(row.cum_pct)])
    return rows, headers


def get_correlation_rows(table: CorrelationTable, digits: int = 3):
    """
    Upper triangle of pairwise correlations plus a final 'Missing Data' row.
    Undefined correlations print as NA.
    """
    headers = ["Variable"] + list(table.variables)
    rows = []
    for i, a in enumerate(table.variables):
        cells = []
        for j, b in enumerate(table.variables):
            if j < i:
                cells.append("")
            elif j == i:
                cells.append("-")
            else:
                cells.append(format_number(table.value(a, b), digits))
        rows.append([a] + cells)
    rows.append(["Missing Data"] + [format_percent(v) for v in table.missing_pct])
    return rows, headers


def pattern_records(table: PatternTable):
    """JSON form of the pattern table."""
    return {
        "variables": list(table.variables),
        "n_rows": table.n_rows,
        "n_patterns": table.n_patterns,
        "patterns": [
            {"observed": list(row.observed), "count": row.count, "rel_pct": row.rel_pct, "cum_pct": row.cum_pct}
            for row in table.rows
        ],
    }
