#!/usr/bin/env python3
import sys
from pathlib import Path
from typing import List, Optional

import click
import typer

from mlmi_cli.commands import analyze, data, diagnose, impute, pool, synth
from mlmi_cli.utils.common import exit_on_error
from mlmi_cli.utils.config import load_run_config
from mlmi_cli.utils.logger import LogFormat, set_log_format

app = typer.Typer(help="Multilevel multiple imputation: impute, diagnose, analyze and pool", no_args_is_help=True)

# Register Subcommands
app.command("patterns")(data.patterns)
app.command("correlate")(data.correlate)
app.command("transform")(data.transform)
app.command("impute")(impute.impute)
app.command("diagnose")(diagnose.diagnose)
app.command("analyze")(analyze.analyze)
app.add_typer(synth.app, name="synth")
app.add_typer(pool.app, name="pool")


@app.callback()
def cli_config(
    ctx: typer.Context,
    log_format: LogFormat = typer.Option(LogFormat.text, "--log-format", help="Log format on stderr"),
    config: Path = typer.Option(None, "--config", "-c", help="JSON run config; flags override its values"),
):
    """
    Global configuration.
    """
    set_log_format(log_format.value)

    # Sections are read by the subcommands: config["impute"], config["analyze"], ...
    with exit_on_error():
        ctx.meta["run_config"] = load_run_config(config)


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Runs one subcommand and returns its exit code: 0 ok, 1 bad input or usage, 2 numerical failure."""
    command = typer.main.get_command(app)
    try:
        rv = command.main(args=argv, prog_name="mlmi", standalone_mode=False)
    except click.exceptions.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 1
    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
