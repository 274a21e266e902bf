import json
import os
from pathlib import Path
from typing import Any, Dict

import numpy as np
import typer

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.data_model import Dataset, write_dataset
from mlmi_cli.imputation.synthetic import ampute, generate_two_level, pirls_like, true_parameters
from mlmi_cli.utils.common import exit_on_error
from mlmi_cli.utils.config import command_config, resolve_settings
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

app = typer.Typer(help="Generate synthetic two-level data sets")

TWO_LEVEL_DEFAULTS = {
    "groups": 100,
    "group_size": 20,
    "icc": 0.2,
    "responses": 1,
    "covariates": 0,
    "slope": 0.5,
    "slope_variance": 0.0,
    "mcar": 0.0,
    "seed": None,
}


def params_path(out: Path) -> Path:
    """data.csv -> data.params.json"""
    return out.with_name(f"{out.stem}.params.json")


def two_level_parameters(settings: Dict[str, Any]):
    """
    beta, psi, sigma for unit-variance responses with the requested ICC.
    Covariates get a common slope; a positive slope variance puts a random
    slope on the first covariate.
    """
    r, n_cov = int(settings["responses"]), int(settings["covariates"])
    icc, slope_variance = float(settings["icc"]), float(settings["slope_variance"])
    if r < 1:
        raise ValidationError("--responses must be >= 1")
    if n_cov < 0:
        raise ValidationError("--covariates must be >= 0")
    if not 0.0 <= icc < 1.0:
        raise ValidationError(f"--icc must lie in [0, 1), got {icc}")
    if slope_variance < 0.0:
        raise ValidationError("--slope-variance must be >= 0")
    if slope_variance > 0.0 and n_cov < 1:
        raise ValidationError("A random slope needs at least one covariate")

    beta = np.vstack([np.zeros((1, r)), np.full((n_cov, r), float(settings["slope"]))])
    level2 = [icc, slope_variance] if slope_variance > 0.0 else [icc]
    psi = np.kron(np.eye(r), np.diag(level2))
    sigma = (1.0 - icc) * np.eye(r)
    return beta, psi, sigma


def _load_params(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            params = json.load(f)
    except FileNotFoundError as e:
        raise ValidationError(f"Parameter file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"Parameter file {path} is not valid JSON: {e}") from e
    missing = [k for k in ("beta", "psi", "sigma") if k not in params]
    if missing:
        raise ValidationError(f"Parameter file {path} lacks: {', '.join(missing)}")
    return params


def _write_outputs(d: Dataset, out: Path, sidecar: Dict[str, Any]) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(d, out)
    target = params_path(out)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=4, sort_keys=True)
        f.write("\n")
    os.chmod(target, 0o600)
    typer.secho(f"Wrote {d.n_rows} rows to {out} (parameters in {target})", fg=typer.colors.GREEN)


@app.command("two-level")
def two_level(
    ctx: typer.Context,
    out: Path = typer.Option(..., "--out", help="CSV file to write"),
    seed: int = typer.Option(None, "--seed", help="Random seed (required here or in the config)"),
    groups: int = typer.Option(None, "--groups", help="Number of groups J"),
    group_size: int = typer.Option(None, "--group-size", help="Rows per group"),
    icc: float = typer.Option(None, "--icc", help="Intercept ICC of every response"),
    responses: int = typer.Option(None, "--responses", help="Number of responses Y1, Y2, ..."),
    covariates: int = typer.Option(None, "--covariates", help="Number of standard-normal covariates x1, x2, ..."),
    slope_variance: float = typer.Option(None, "--slope-variance", help="Random-slope variance on x1"),
    mcar: float = typer.Option(None, "--mcar", help="MCAR missing rate imposed on every response"),
    params: Path = typer.Option(None, "--params", help="JSON file with beta, psi, sigma (overrides the knobs)"),
):
    """Draw data from the two-level model, optionally with MCAR missingness."""
    with exit_on_error():
        settings = resolve_settings(
            {
                "groups": groups,
                "group_size": group_size,
                "icc": icc,
                "responses": responses,
                "covariates": covariates,
                "slope_variance": slope_variance,
                "mcar": mcar,
                "seed": seed,
            },
            command_config(ctx, "synth"),
            TWO_LEVEL_DEFAULTS,
        )
        if settings["seed"] is None:
            raise ValidationError("An explicit --seed is required")
        seed = int(settings["seed"])

        if params is not None:
            loaded = _load_params(params)
            beta, psi, sigma = loaded["beta"], loaded["psi"], loaded["sigma"]
            names = loaded.get("responses")
        else:
            beta, psi, sigma = two_level_parameters(settings)
            names = None

        J, n = int(settings["groups"]), int(settings["group_size"])
        d = generate_two_level(J, n, beta, psi, sigma, seed, response_names=names)
        truth = true_parameters(J, n, beta, psi, sigma, seed, response_names=names)

        rate = float(settings["mcar"])
        if rate > 0.0:
            d = ampute(d, "MCAR", {name: rate for name in truth.response_names}, seed=seed + 1)

        sidecar = truth.to_dict()
        sidecar["mcar"] = rate
        _write_outputs(d, out, sidecar)


@app.command("pirls")
def pirls(
    ctx: typer.Context,
    out: Path = typer.Option(..., "--out", help="CSV file to write"),
    seed: int = typer.Option(None, "--seed", help="Random seed (required here or in the config)"),
):
    """Demo data: 8,767 students in 475 classes with realistic missing-data patterns."""
    with exit_on_error():
        settings = resolve_settings({"seed": seed}, command_config(ctx, "synth"), {"seed": None})
        if settings["seed"] is None:
            raise ValidationError("An explicit --seed is required")
        d = pirls_like(int(settings["seed"]))
        missing = {v: float(np.isnan(d.column(v)).mean()) for v in d.variables}
        _write_outputs(d, out, {"seed": int(settings["seed"]), "rows": d.n_rows, "missing": missing})
