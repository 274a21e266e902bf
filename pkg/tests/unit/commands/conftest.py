import numpy as np
import pytest
from typer.testing import CliRunner

from mlmi_cli.imputation.data_model import write_dataset
from mlmi_cli.imputation.synthetic import ampute, generate_two_level
from mlmi_cli.main import app

IMPUTATION_FORMULA = "Y1 + Y2 ~ 1 + x1 + (1 | ID)"
ANALYSIS_FORMULA = "Y1 ~ 1 + x1 + (1 | ID)"
NULL_FORMULA = "Y1 ~ 1 + (1 | ID)"


def impute_args(data, out, seed=1):
    return [
        "impute",
        "--data", str(data),
        "--group", "ID",
        "--formula", IMPUTATION_FORMULA,
        "--burnin", "20",
        "--between", "5",
        "--m", "3",
        "--trace-stride", "1",
        "--seed", str(seed),
        "--out", str(out),
    ]  # fmt: skip


@pytest.fixture(scope="session")
def impute_cli():
    """Builder for impute arguments: impute_cli(data, out, seed=1)."""
    return impute_args


@pytest.fixture(scope="session")
def data_file(tmp_path_factory):
    complete = generate_two_level(12, 6, [[0.0, 0.0], [0.8, 0.4]], 0.3 * np.eye(2), np.array([[1.0, 0.3], [0.3, 1.0]]), seed=5)
    incomplete = ampute(complete, "MCAR", {"Y1": 0.2, "Y2": 0.2}, seed=6)
    path = tmp_path_factory.mktemp("data") / "school.csv"
    write_dataset(incomplete, path)
    return path


@pytest.fixture(scope="session")
def run_dir(data_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "run"
    result = CliRunner().invoke(app, impute_args(data_file, out))
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="session")
def fits_dirs(run_dir, tmp_path_factory):
    """ML fits of the full and the null analysis model on every imputed data set."""
    base = tmp_path_factory.mktemp("fits")
    dirs = {}
    for name, formula in (("full", ANALYSIS_FORMULA), ("null", NULL_FORMULA)):
        out = base / name
        args = ["analyze", "--run", str(run_dir), "--formula", formula, "--method", "ML", "--jobs", "1", "--out", str(out)]
        result = CliRunner().invoke(app, args)
        assert result.exit_code == 0, result.output
        dirs[name] = out
    return dirs
