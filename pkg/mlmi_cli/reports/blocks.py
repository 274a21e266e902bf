"""
Plain-text output blocks: convergence summary, pooled estimates, pooled tests.
Every function returns the block as a string; commands decide where it goes.
"""
from typing import Dict, List, Sequence

import pandas as pd

from mlmi_cli.analysis.pooling import DTestResult, PooledEstimates, PooledParameter
from mlmi_cli.imputation.diagnostics import ConvergenceReport, parameter_block
from mlmi_cli.utils.common import format_number, json_number

ADJUSTED = "Adjusted hypothesis test as appropriate in small samples."
UNADJUSTED = "Unadjusted hypothesis test as appropriate in larger samples."


def grid(row_labels: Sequence[str], headers: Sequence[str], cells: Sequence[Sequence[str]], indent: int = 0) -> List[str]:
    """Right-aligned columns under a left-aligned label column."""
    label_width = max([len(s) for s in row_labels] + [0])
    widths = [max([len(h)] + [len(row[k]) for row in cells]) for k, h in enumerate(headers)]
    pad = " " * indent
    lines = [pad + " " * label_width + "".join(f"  {h:>{w}}" for h, w in zip(headers, widths))]
    for label, row in zip(row_labels, cells):
        lines.append(pad + f"{label:<{label_width}}" + "".join(f"  {c:>{w}}" for c, w in zip(row, widths)))
    return lines


def _df(value: float) -> str:
    return format_number(value, 1)


def _parameter_cells(row: PooledParameter) -> List[str]:
    return [
        format_number(row.estimate),
        format_number(row.se),
        format_number(row.t),
        _df(row.df),
        format_number(row.p),
        format_number(row.riv),
        format_number(row.fmi),
    ]


def render_convergence(report: ConvergenceReport) -> str:
    lines = []
    meta = report.metadata
    if meta:
        lines.append("Imputation summary")
        lines.append("")
        for key in ("formula", "group", "m", "n_burn", "n_between", "n_iterations", "seed"):
            if key in meta:
                lines.append(f"  {key + ':':<14}{meta[key]}")
        lines.append("")

    lines.append(f"Potential scale reduction (Rhat, imputation phase, {report.n_segments} segments):")
    lines.append("")
    labels = [f"{b.block}:" for b in report.blocks]
    cells = [[format_number(v) for v in (b.minimum, b.q25, b.mean, b.q75, b.maximum)] for b in report.blocks]
    lines += grid(labels, ["Min", "25%", "Mean", "75%", "Max"], cells, indent=2)
    lines.append("")
    lines.append("Largest potential scale reduction:")
    largest = []
    for b in report.blocks:
        _, index = parameter_block(b.worst_name)
        largest.append(f"{b.block}: [{index}]" if index else b.worst_name)
    lines.append(", ".join(largest))
    lines.append("")
    if report.flagged:
        lines.append(f"{len(report.flagged)} parameter(s) above {report.threshold:.3f}; a longer burn-in may be required:")
        lines.append("  " + ", ".join(report.flagged))
    else:
        lines.append(f"All parameters below {report.threshold:.3f}.")
    return "\n".join(lines) + "\n"


def render_estimates(pooled: PooledEstimates) -> str:
    lines = [f"Final parameter estimates and inferences obtained from {pooled.m} imputed data sets.", ""]
    headers = ["Estimate", "Std.Error", "t.value", "df", "P(>|t|)", "RIV", "FMI"]
    lines += grid([p.name for p in pooled.parameters], headers, [_parameter_cells(p) for p in pooled.parameters])
    lines.append("")
    if pooled.components:
        names = list(pooled.components)
        lines += grid(names, ["Estimate"], [[format_number(pooled.components[n])] for n in names])
        lines.append("")
    lines.append(ADJUSTED if pooled.adjusted else UNADJUSTED)
    return "\n".join(lines) + "\n"


def _test_grid(result: DTestResult) -> List[str]:
    cells = [[format_number(result.F), format_number(result.df1, 0), _df(result.df2), format_number(result.p), format_number(result.r)]]
    return grid([""], ["F.value", "df1", "df2", "P(>F)", "RIV"], cells, indent=2)


def render_dtest(result: DTestResult) -> str:
    if result.procedure == "D1":
        lines = [f"Hypothesis test calculated from {result.m} imputed data sets. The following", "constraints were specified:", ""]
        headers = ["Estimate", "Std.Error", "t.value", "df", "P(>|t|)", "RIV", "FMI"]
        lines += grid([f"{e.name}:" for e in result.estimates], headers, [_parameter_cells(e) for e in result.estimates], indent=2)
    else:
        lines = [f"Model comparison calculated from {result.m} imputed data sets.", ""]
        lines += [f"  {h}" for h in result.hypothesis]
    lines.append("")
    lines.append(f"Combination method: {result.procedure}")
    lines.append("")
    lines += _test_grid(result)
    lines.append("")
    for note in result.notes:
        lines.append(f"Note: {note}")
    lines.append(UNADJUSTED)
    return "\n".join(lines) + "\n"


def convergence_record(report: ConvergenceReport) -> Dict:
    """JSON form of the convergence summary."""
    return {
        "rhat": {name: json_number(value) for name, value in report.rhat.items()},
        "blocks": [
            {
                "block": b.block,
                "summary": [json_number(v) for v in (b.minimum, b.q25, b.mean, b.q75, b.maximum)],
                "worst": {"name": b.worst_name, "rhat": json_number(b.worst_value)},
            }
            for b in report.blocks
        ],
        "worst": {"name": report.worst_name, "rhat": json_number(report.worst_value)},
        "threshold": report.threshold,
        "flagged": list(report.flagged),
        "converged": report.converged,
        "segments": report.n_segments,
        "metadata": report.metadata,
    }


def plot_records(table: pd.DataFrame, output_format: str = "text") -> List[Dict]:
    """Plot-data rows for print_formatted_output; floats formatted in text mode, JSON-safe otherwise."""
    cell = (lambda v: format_number(v, 4)) if output_format == "text" else json_number
    records = []
    for row in table.to_dict(orient="records"):
        records.append({k: cell(v) if isinstance(v, float) else v for k, v in row.items()})
    return records
