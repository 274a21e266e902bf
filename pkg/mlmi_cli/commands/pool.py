from enum import Enum
from pathlib import Path
from typing import List

import typer

from mlmi_cli.analysis.pooling import pool_compare_d2, pool_constraints, pool_estimates, pool_lrt_d3
from mlmi_cli.analysis.storage import read_fits
from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.storage import IMPUTATION_DIR, read_imputations
from mlmi_cli.reports.blocks import render_dtest, render_estimates
from mlmi_cli.utils.common import exit_on_error
from mlmi_cli.utils.config import command_config, resolve_settings
from mlmi_cli.utils.logger import OutputFormat, get_logger, print_formatted_output

logger = get_logger(__name__)

app = typer.Typer(help="Pool analysis results across imputed data sets")


class CompareMethod(str, Enum):
    D3 = "D3"
    D2 = "D2"


def imputation_source(path: Path) -> Path:
    """A run directory stands for its imputations/ folder."""
    return path / IMPUTATION_DIR if (path / IMPUTATION_DIR).is_dir() else path


def _show(result, render, output_format: OutputFormat) -> None:
    if output_format == OutputFormat.json:
        print_formatted_output(result.to_dict(), output_format="json")
    else:
        print(render(result), end="")


@app.command("estimates")
def estimates(
    ctx: typer.Context,
    fits: Path = typer.Option(..., "--fits", help="Directory of fit_NNN.json files"),
    df_com: str = typer.Option(None, "--df-com", help="Complete-data df: a number or 'auto' (N - p) for small-sample df"),
    output_format: OutputFormat = typer.Option(OutputFormat.text, "--format", help="Output format"),
):
    """Rubin's rules for the fixed effects; pooled variance components."""
    with exit_on_error():
        settings = resolve_settings({"df_com": df_com}, command_config(ctx, "pool"), {"df_com": None})
        pooled = pool_estimates(read_fits(fits), df_com=settings["df_com"])
    _show(pooled, render_estimates, output_format)


@app.command("constraints")
def constraints(
    fits: Path = typer.Option(..., "--fits", help="Directory of fit_NNN.json files"),
    constraint: List[str] = typer.Option(..., "--constraint", help="e.g. 'SES.mean - SES.cwc'; repeatable"),
    output_format: OutputFormat = typer.Option(OutputFormat.text, "--format", help="Output format"),
):
    """D1 test of one or more constraints on the fixed effects (delta method)."""
    with exit_on_error():
        result = pool_constraints(read_fits(fits), constraint)
    _show(result, render_dtest, output_format)


@app.command("compare")
def compare(
    full: Path = typer.Option(..., "--full", help="Fits of the larger model (ML)"),
    null: Path = typer.Option(..., "--null", help="Fits of the nested model (ML)"),
    imputations: Path = typer.Option(None, "--imputations", help="Run directory or imputed data sets (needed for D3)"),
    method: CompareMethod = typer.Option(CompareMethod.D3, "--method", help="D3 (pooled likelihood ratio) | D2 (pooled chi-square)"),
    k: int = typer.Option(None, "--k", help="Parameters constrained under the null [default: difference in parameter counts]"),
    output_format: OutputFormat = typer.Option(OutputFormat.text, "--format", help="Output format"),
):
    """Likelihood-ratio comparison of nested models across imputations."""
    with exit_on_error():
        fits_full = read_fits(full)
        fits_null = read_fits(null)
        if method == CompareMethod.D2:
            result = pool_compare_d2(fits_full, fits_null, k=k)
        else:
            if imputations is None:
                raise ValidationError("D3 re-evaluates likelihoods and needs --imputations")
            datasets = read_imputations(imputation_source(imputations), fits_full[0].group)
            result = pool_lrt_d3(fits_full, fits_null, datasets, k=k)
    _show(result, render_dtest, output_format)
