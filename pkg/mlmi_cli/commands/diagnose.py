from pathlib import Path
from typing import List

import typer

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.diagnostics import DEFAULT_SEGMENTS, DEFAULT_THRESHOLD, PLOT_KINDS, convergence_report, export_plot_data
from mlmi_cli.imputation.mlmm_gibbs import ChainStore
from mlmi_cli.imputation.storage import read_run_chains
from mlmi_cli.reports.blocks import convergence_record, plot_records, render_convergence
from mlmi_cli.utils.common import exit_on_error
from mlmi_cli.utils.config import command_config, resolve_settings
from mlmi_cli.utils.logger import OutputFormat, get_logger, print_formatted_output

logger = get_logger(__name__)

METADATA_KEYS = ("formula", "group", "m", "n_burn", "n_between", "n_iterations", "seed")


def load_chains(own: ChainStore, extra: List[Path]) -> ChainStore:
    """The run's own traces, stacked with traces of further chains when given."""
    stores = [own]
    stores += [ChainStore.read(path) for path in extra or []]
    if len(stores) == 1:
        return stores[0]
    logger.info(f"Merged {len(stores)} chains")
    return ChainStore.merge(stores)


def diagnose(
    ctx: typer.Context,
    run: Path = typer.Option(..., "--run", help="Imputation run directory"),
    chains: List[Path] = typer.Option(None, "--chains", help="Traces of further chains (chains.csv of other runs); repeatable"),
    segments: int = typer.Option(None, "--segments", help=f"Segments per chain for R-hat [default: {DEFAULT_SEGMENTS}]"),
    threshold: float = typer.Option(None, "--threshold", help=f"Flag parameters with R-hat above this [default: {DEFAULT_THRESHOLD}]"),
    plot: str = typer.Option(None, "--plot", help="Parameter to export for plotting, e.g. 'Beta[1,1]'"),
    what: str = typer.Option("trace", "--what", help="trace | acf | posterior"),
    svg: Path = typer.Option(None, "--svg", help="Also render the plot as SVG"),
    out: Path = typer.Option(None, "--out", help="Write the plot data to this CSV file"),
    output_format: OutputFormat = typer.Option(OutputFormat.text, "--format", help="Output format"),
):
    """Convergence summary (potential scale reduction per parameter) or plot data for one parameter."""
    with exit_on_error():
        settings = resolve_settings(
            {"segments": segments, "threshold": threshold},
            command_config(ctx, "diagnose"),
            {"segments": DEFAULT_SEGMENTS, "threshold": DEFAULT_THRESHOLD},
        )
        spec, own = read_run_chains(run)
        store = load_chains(own, chains)

        if plot is not None:
            if what not in PLOT_KINDS:
                raise ValidationError(f"Unknown plot kind '{what}' (expected one of: {', '.join(PLOT_KINDS)})")
            table = export_plot_data(store, plot, what, out_path=out, svg_path=svg)
            if out is None:
                rows = plot_records(table, output_format.value)
                print_formatted_output(rows, headers=list(table.columns), output_format=output_format.value)
            return

        metadata = {k: spec[k] for k in METADATA_KEYS if k in spec}
        report = convergence_report(store, n_segments=int(settings["segments"]), threshold=float(settings["threshold"]), metadata=metadata)

    if output_format == OutputFormat.json:
        print_formatted_output(convergence_record(report), output_format="json")
    else:
        print(render_convergence(report), end="")
