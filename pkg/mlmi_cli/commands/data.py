from pathlib import Path
from typing import List, Optional

import typer

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.data_model import load_dataset, pairwise_correlations, pattern_summary
from mlmi_cli.imputation.storage import IMPUTATION_DIR, read_run_imputations, write_imputations, write_spec
from mlmi_cli.imputation.transforms import apply_to_all, parse_script
from mlmi_cli.reports.data import get_correlation_rows, get_pattern_rows, pattern_records
from mlmi_cli.utils.common import exit_on_error
from mlmi_cli.utils.config import command_config, resolve_settings, save_effective_config
from mlmi_cli.utils.logger import OutputFormat, get_logger, print_formatted_output
from mlmi_cli.utils.reporter import publish_report

logger = get_logger(__name__)


def split_names(value: Optional[str]) -> Optional[List[str]]:
    """'MA, SES' -> ['MA', 'SES']."""
    if value is None:
        return None
    names = [v.strip() for v in value.split(",") if v.strip()]
    return names or None


def patterns(
    data: Path = typer.Option(..., "--data", help="Delimited data file with a header row"),
    group: str = typer.Option(..., "--group", help="Group (cluster) column"),
    columns: str = typer.Option(None, "--columns", help="Comma-separated variables (default: all but the group column)"),
    min_cum: float = typer.Option(1.0, "--min-cum", help="Stop once this cumulative share of rows is covered"),
    sep: str = typer.Option(",", "--sep", help="Field separator"),
    out: Path = typer.Option(None, "--out", help="Also write the table to this file"),
    output_format: OutputFormat = typer.Option(OutputFormat.text, "--format", help="Output format"),
):
    """Missing-data patterns, most frequent first."""
    with exit_on_error():
        d = load_dataset(data, group, sep=sep)
        table = pattern_summary(d, min_cum_pct=min_cum, columns=split_names(columns))

    if output_format == OutputFormat.json:
        print_formatted_output(pattern_records(table), output_format="json")
        return
    rows, headers = get_pattern_rows(table)
    publish_report(rows, headers, f"Missing data patterns ({table.n_rows} rows, {table.n_patterns} patterns)", out_path=out)


def correlate(
    data: Path = typer.Option(..., "--data", help="Delimited data file with a header row"),
    group: str = typer.Option(..., "--group", help="Group (cluster) column"),
    columns: str = typer.Option(None, "--columns", help="Comma-separated variables (default: all but the group column)"),
    digits: int = typer.Option(3, "--digits", min=0, help="Decimals shown"),
    sep: str = typer.Option(",", "--sep", help="Field separator"),
    out: Path = typer.Option(None, "--out", help="Also write the table to this file"),
    output_format: OutputFormat = typer.Option(OutputFormat.text, "--format", help="Output format"),
):
    """Pairwise observed-data correlations and the share of missing values per variable."""
    with exit_on_error():
        d = load_dataset(data, group, sep=sep)
        table = pairwise_correlations(d, columns=split_names(columns))

    rows, headers = get_correlation_rows(table, digits=digits)
    publish_report(rows, headers, "Pairwise observed-data correlations", out_path=out, output_format=output_format.value)


def transform(
    ctx: typer.Context,
    run: Path = typer.Option(..., "--run", help="Imputation run directory"),
    script: str = typer.Option(None, "--script", help="e.g. 'groupmean(SES -> SES.mean); cwc(SES -> SES.cwc)'"),
    out: Path = typer.Option(..., "--out", help="Output directory for the transformed data sets"),
    layout: str = typer.Option(None, "--layout", help="separate | long"),
):
    """Apply group-mean and centering transforms to every imputed data set."""
    with exit_on_error():
        settings = resolve_settings(
            {"script": script, "layout": layout},
            command_config(ctx, "transform"),
            {"script": None, "layout": "separate"},
        )
        if not settings["script"]:
            raise ValidationError("A transform script is required (--script or config 'transform.script')")

        steps = parse_script(settings["script"])
        spec, datasets = read_run_imputations(run)
        transformed = apply_to_all(datasets, steps)

        write_imputations(transformed, out / IMPUTATION_DIR, layout=settings["layout"])
        spec["source_run"] = str(run)
        spec["transforms"] = [str(s) for s in steps]
        write_spec(out, spec)
        save_effective_config(out, {"run": str(run), "out": str(out), **settings})

    logger.info(f"Applied {len(steps)} transform(s) to {len(transformed)} data set(s)")
    typer.secho(f"Transformed data sets written to {out / IMPUTATION_DIR}", fg=typer.colors.GREEN)
