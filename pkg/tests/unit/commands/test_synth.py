import json
import os
from unittest.mock import patch

import numpy as np
import pytest
from typer.testing import CliRunner

from mlmi_cli.commands.synth import TWO_LEVEL_DEFAULTS, params_path, two_level_parameters
from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.data_model import load_dataset
from mlmi_cli.imputation.synthetic import generate_two_level
from mlmi_cli.main import app

runner = CliRunner()

PATCH_PATH = "mlmi_cli.commands.synth"


@pytest.mark.unit
def test_two_level_writes_data_and_parameters(tmp_path):
    out = tmp_path / "sim.csv"
    result = runner.invoke(
        app, ["synth", "two-level", "--out", str(out), "--seed", "4", "--groups", "5", "--group-size", "3", "--covariates", "1", "--mcar", "0.3"]
    )
    assert result.exit_code == 0, result.output
    assert "Wrote 15 rows" in result.stdout

    d = load_dataset(out, "ID")
    assert d.columns == ("ID", "Y1", "x1")
    params = json.loads(params_path(out).read_text())
    assert params["seed"] == 4
    assert params["mcar"] == 0.3
    assert params["icc"] == {"Y1": pytest.approx(0.2)}
    if os.name != "nt":
        assert oct(os.stat(params_path(out)).st_mode & 0o777) == "0o600"


@pytest.mark.unit
def test_two_level_is_reproducible(tmp_path):
    for name in ("a.csv", "b.csv"):
        runner.invoke(app, ["synth", "two-level", "--out", str(tmp_path / name), "--seed", "9", "--groups", "4", "--group-size", "2"])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.unit
def test_two_level_requires_seed(tmp_path):
    result = runner.invoke(app, ["synth", "two-level", "--out", str(tmp_path / "sim.csv")])
    assert result.exit_code == 1
    assert "--seed is required" in result.output


@pytest.mark.unit
def test_two_level_seed_from_config(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"synth": {"seed": 2, "groups": 3, "group_size": 2}}))
    result = runner.invoke(app, ["-c", str(config), "synth", "two-level", "--out", str(tmp_path / "sim.csv")])
    assert result.exit_code == 0, result.output
    assert load_dataset(tmp_path / "sim.csv", "ID").n_rows == 6


@pytest.mark.unit
def test_two_level_from_parameter_file(tmp_path):
    params = tmp_path / "truth.json"
    params.write_text(json.dumps({"beta": [[1.0, 2.0]], "psi": [[0.5, 0.0], [0.0, 0.5]], "sigma": [[1.0, 0.2], [0.2, 1.0]], "responses": ["MA", "RA"]}))
    out = tmp_path / "sim.csv"
    result = runner.invoke(app, ["synth", "two-level", "--out", str(out), "--seed", "1", "--groups", "4", "--group-size", "5", "--params", str(params)])
    assert result.exit_code == 0, result.output
    assert load_dataset(out, "ID").variables == ("MA", "RA")


@pytest.mark.unit
def test_two_level_bad_parameter_file(tmp_path):
    params = tmp_path / "truth.json"
    params.write_text(json.dumps({"beta": [[0.0]]}))
    result = runner.invoke(app, ["synth", "two-level", "--out", str(tmp_path / "sim.csv"), "--seed", "1", "--params", str(params)])
    assert result.exit_code == 1
    assert "lacks: psi, sigma" in result.output


@pytest.mark.unit
def test_two_level_parameters():
    settings = {**TWO_LEVEL_DEFAULTS, "responses": 2, "covariates": 1, "icc": 0.25, "slope_variance": 0.1}
    beta, psi, sigma = two_level_parameters(settings)
    np.testing.assert_array_equal(beta, [[0.0, 0.0], [0.5, 0.5]])
    np.testing.assert_array_equal(np.diag(psi), [0.25, 0.1, 0.25, 0.1])
    np.testing.assert_array_equal(sigma, 0.75 * np.eye(2))


@pytest.mark.unit
def test_random_slope_needs_a_covariate():
    with pytest.raises(ValidationError, match="at least one covariate"):
        two_level_parameters({**TWO_LEVEL_DEFAULTS, "slope_variance": 0.2})


@pytest.mark.unit
def test_pirls_demo(tmp_path):
    small = generate_two_level(3, 2, [[0.0]], [[0.2]], [[0.8]], seed=1)
    with patch(f"{PATCH_PATH}.pirls_like", return_value=small) as mock_demo:
        result = runner.invoke(app, ["synth", "pirls", "--out", str(tmp_path / "pirls.csv"), "--seed", "12"])

    assert result.exit_code == 0, result.output
    mock_demo.assert_called_once_with(12)
    sidecar = json.loads((tmp_path / "pirls.params.json").read_text())
    assert sidecar == {"seed": 12, "rows": 6, "missing": {"Y1": 0.0}}
