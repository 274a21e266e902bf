from pathlib import Path

import typer
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.data_model import load_dataset
from mlmi_cli.imputation.diagnostics import convergence_report
from mlmi_cli.imputation.formula import parse_formula
from mlmi_cli.imputation.mlmm_gibbs import ImputationSpec, Prior, run_imputation
from mlmi_cli.imputation.storage import LAYOUTS, write_run
from mlmi_cli.reports.blocks import render_convergence
from mlmi_cli.utils.common import exit_on_error
from mlmi_cli.utils.config import command_config, resolve_settings, save_effective_config
from mlmi_cli.utils.logger import get_logger, run_context

logger = get_logger(__name__)

# stdout carries the summary only
console = Console(stderr=True)

DEFAULTS = {
    "data": None,
    "group": None,
    "formula": None,
    "burnin": 5000,
    "between": 100,
    "m": 10,
    "seed": None,
    "trace_stride": 10,
    "single_level": False,
    "layout": "separate",
    "sep": ",",
    "prior": None,
}


def _require(settings, *keys):
    missing = [k for k in keys if settings.get(k) in (None, "")]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ValidationError(f"Missing required setting(s): {flags}")


def impute(
    ctx: typer.Context,
    data: Path = typer.Option(None, "--data", help="Incomplete data set (CSV with header)"),
    group: str = typer.Option(None, "--group", help="Group (cluster) column"),
    formula: str = typer.Option(None, "--formula", help="Imputation model, e.g. 'MA + SES ~ 1 + (1 | ID)'"),
    burnin: int = typer.Option(None, "--burnin", help="Burn-in iterations [default: 5000]"),
    between: int = typer.Option(None, "--between", help="Iterations between saved data sets [default: 100]"),
    m: int = typer.Option(None, "--m", help="Number of imputed data sets [default: 10]"),
    seed: int = typer.Option(None, "--seed", help="Random seed (required here or in the config)"),
    trace_stride: int = typer.Option(None, "--trace-stride", help="Store parameter traces every k-th iteration [default: 10]"),
    single_level: bool = typer.Option(None, "--single-level/--multilevel", help="Ignore the grouping (flat imputation)"),
    layout: str = typer.Option(None, "--layout", help="separate (imp_001.csv, ...) | long (one file with '.imp')"),
    out: Path = typer.Option(..., "--out", help="Output run directory"),
):
    """
    Impute missing values with the multilevel Gibbs sampler and save m completed data sets,
    the parameter traces and the run spec. Prints the convergence summary.
    """
    with exit_on_error():
        # 1. Settings: flag > config > default
        settings = resolve_settings(
            {
                "data": str(data) if data is not None else None,
                "group": group,
                "formula": formula,
                "burnin": burnin,
                "between": between,
                "m": m,
                "seed": seed,
                "trace_stride": trace_stride,
                "single_level": single_level,
                "layout": layout,
            },
            command_config(ctx, "impute"),
            DEFAULTS,
        )
        _require(settings, "data", "group", "formula", "seed")
        if settings["layout"] not in LAYOUTS:
            raise ValidationError(f"Unknown layout '{settings['layout']}' (expected one of: {', '.join(LAYOUTS)})")

        # 2. Inputs
        dataset = load_dataset(Path(settings["data"]), settings["group"], sep=settings["sep"])
        spec = ImputationSpec(
            formula=parse_formula(settings["formula"]),
            dataset=dataset,
            seed=int(settings["seed"]),
            n_burn=int(settings["burnin"]),
            n_between=int(settings["between"]),
            m=int(settings["m"]),
            prior=Prior.from_dict(settings["prior"]) if settings["prior"] else None,
            trace_stride=int(settings["trace_stride"]),
            single_level=bool(settings["single_level"]),
        )
        spec.validate()

        # 3. Sampler
        progress = Progress(
            TextColumn("[bold green]Imputing"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            console=console,
            disable=not console.is_terminal,
        )
        with progress, run_context(run=str(out)):
            task = progress.add_task("gibbs", total=spec.n_burn + spec.m * spec.n_between)
            result = run_imputation(spec, progress=lambda it, total: progress.update(task, completed=it))

        # 4. Outputs
        write_run(result, out, layout=settings["layout"])
        save_effective_config(out, settings)

    try:
        report = convergence_report(result.chains, metadata={**spec.to_config(), "n_iterations": result.n_iterations})
    except ValidationError as e:
        logger.warning(f"No convergence summary: {e}")
        return
    print(render_convergence(report), end="")
