from pathlib import Path

import typer
from rich.console import Console

from mlmi_cli.analysis.lmm_fit import METHODS, AnalysisModel, fit_all
from mlmi_cli.analysis.storage import write_fits
from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.storage import read_run_imputations
from mlmi_cli.utils.common import exit_on_error
from mlmi_cli.utils.config import command_config, resolve_settings, save_effective_config
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)
console = Console(stderr=True)


def analyze(
    ctx: typer.Context,
    run: Path = typer.Option(..., "--run", help="Imputation (or transformed) run directory"),
    formula: str = typer.Option(None, "--formula", help="Analysis model, e.g. 'MA ~ 1 + SES + (1 | ID)'"),
    method: str = typer.Option(None, "--method", help="REML | ML [default: REML]"),
    jobs: int = typer.Option(None, "--jobs", help="Worker processes [default: available cores]"),
    out: Path = typer.Option(..., "--out", help="Directory for fit_001.json, ..."),
):
    """Fit the analysis model to every imputed data set."""
    with exit_on_error():
        settings = resolve_settings(
            {"formula": formula, "method": method, "jobs": jobs},
            command_config(ctx, "analyze"),
            {"formula": None, "method": "REML", "jobs": None},
        )
        if not settings["formula"]:
            raise ValidationError("An analysis formula is required (--formula or config 'analyze.formula')")
        if str(settings["method"]).upper() not in METHODS:
            raise ValidationError(f"Unknown estimation method '{settings['method']}' (expected REML or ML)")

        model = AnalysisModel.from_text(settings["formula"], settings["method"])
        _, datasets = read_run_imputations(run)

        with console.status(f"[bold green]Fitting {len(datasets)} model(s)..."):
            fits = fit_all(model, datasets, jobs=settings["jobs"])

        write_fits(fits, out)
        save_effective_config(out, {"run": str(run), "out": str(out), **settings})

    boundary = [i for i, fit in enumerate(fits, start=1) if fit.boundary]
    if boundary:
        logger.warning(f"Variance components on the boundary in data set(s): {', '.join(map(str, boundary))}")
    typer.secho(f"Fitted {model.formula.canonical()} ({model.method}) to {len(fits)} data set(s); fits in {out}", fg=typer.colors.GREEN)
