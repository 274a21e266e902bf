import numpy as np
import pytest
from scipy import special

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.synthetic import (
    PIRLS_ICC,
    PIRLS_N,
    PIRLS_VARIABLES,
    ampute,
    correlation_matrix,
    generate_two_level,
    level_covariances,
    logistic_intercept,
    pirls_like,
    true_parameters,
)

pytestmark = pytest.mark.unit


def test_generated_layout():
    d = generate_two_level(5, 4, [[1.0], [2.0]], [[0.5]], [[1.0]], seed=1)
    assert d.columns == ("ID", "Y1", "x1")
    assert d.n_rows == 20
    assert d.frame["ID"].unique().tolist() == ["1", "2", "3", "4", "5"]
    assert d.is_complete(["Y1", "x1"])


def test_unequal_group_sizes_and_names():
    d = generate_two_level(3, [1, 2, 3], [[0.0, 0.0]], np.eye(2), np.eye(2), seed=1, response_names=["a", "b"])
    assert d.frame["ID"].tolist() == ["1", "2", "2", "3", "3", "3"]
    assert d.variables == ("a", "b")


def test_same_seed_same_data():
    args = (10, 5, [[0.0], [1.0]], np.diag([0.3, 0.1]), [[1.0]])
    assert generate_two_level(*args, seed=3).equals(generate_two_level(*args, seed=3))
    assert not generate_two_level(*args, seed=3).equals(generate_two_level(*args, seed=4))


def test_intercept_variance_is_recovered():
    d = generate_two_level(400, 20, [[0.0]], [[0.2]], [[0.8]], seed=5)
    frame = d.frame
    means = frame.groupby("ID")["Y1"].mean()
    within = frame.groupby("ID")["Y1"].var(ddof=1).mean()
    psi_hat = means.var(ddof=1) - within / 20
    assert within == pytest.approx(0.8, abs=0.03)
    assert psi_hat == pytest.approx(0.2, abs=0.05)


def test_zero_slope_variance_is_allowed():
    psi = np.diag([0.3, 0.0])
    d = generate_two_level(4, 3, [[0.0], [1.0]], psi, [[1.0]], seed=2)
    assert d.n_rows == 12


@pytest.mark.parametrize(
    "beta, psi, sigma, match",
    [
        ([[0.0]], [[1.0]], np.eye(2), "sigma must be 1x1"),
        ([[0.0]], np.eye(2), [[1.0]], "only 1 predictors"),
        ([[0.0, 0.0]], np.eye(3), np.eye(2), "not a multiple"),
        ([[0.0]], [[1.0]], [[-1.0]], "semidefinite"),
    ],
)
def test_parameter_checks(beta, psi, sigma, match):
    with pytest.raises(Exception, match=match):
        generate_two_level(2, 2, beta, psi, sigma, seed=1)


def test_asymmetric_matrix_is_rejected():
    with pytest.raises(ValidationError, match="symmetric"):
        generate_two_level(2, 2, [[0.0, 0.0]], np.eye(2), [[1.0, 0.5], [0.0, 1.0]], seed=1)


def test_true_parameters_icc():
    params = true_parameters(3, 2, [[0.0, 0.0]], np.diag([0.25, 0.5]), np.diag([0.75, 0.5]), seed=9)
    assert params.icc() == {"Y1": pytest.approx(0.25), "Y2": pytest.approx(0.5)}
    record = params.to_dict()
    assert record["groups"] == 3
    assert record["group_sizes"] == [2, 2, 2]
    assert record["seed"] == 9


@pytest.fixture(scope="module")
def big():
    return generate_two_level(200, 25, [[0.0]], [[0.2]], [[0.8]], seed=7)


def test_mcar_rate(big):
    d = ampute(big, "MCAR", {"Y1": 0.3}, seed=1)
    assert np.isnan(d.column("Y1")).mean() == pytest.approx(0.3, abs=0.02)
    assert not np.isnan(big.column("Y1")).any()


def test_zero_rate_leaves_column_alone(big):
    d = ampute(big, "MCAR", {"Y1": 0.0}, seed=1)
    assert d.equals(big)


def test_mar_depends_on_driver():
    d = generate_two_level(200, 25, [[0.0, 0.0]], np.diag([0.2, 0.2]), np.eye(2), seed=8)
    out = ampute(d, "mar", {"Y1": 0.25}, mar_driver="Y2", seed=2)
    missing = np.isnan(out.column("Y1"))
    driver = d.column("Y2")
    assert missing.mean() == pytest.approx(0.25, abs=0.02)
    assert driver[missing].mean() > driver[~missing].mean()


@pytest.mark.parametrize(
    "mechanism, rates, driver, match",
    [
        ("MNAR", {"Y1": 0.1}, None, "Unknown mechanism"),
        ("MCAR", {"Y1": 1.0}, None, r"\[0, 1\)"),
        ("MCAR", {"ID": 0.1}, None, "group column"),
        ("MAR", {"Y1": 0.1}, None, "needs a driver"),
        ("MAR", {"Y1": 0.1}, "Y1", "itself be amputed"),
        ("MCAR", {"nope": 0.1}, None, "Unknown variable"),
    ],
)
def test_ampute_errors(big, mechanism, rates, driver, match):
    with pytest.raises(ValidationError, match=match):
        ampute(big, mechanism, rates, mar_driver=driver, seed=1)


def test_logistic_intercept_hits_rate():
    z = np.linspace(-2.0, 2.0, 101)
    a = logistic_intercept(z, -0.4, 0.35)
    assert special.expit(a - 0.4 * z).mean() == pytest.approx(0.35, abs=1e-9)
    assert logistic_intercept(z, 0.0, 0.2) == pytest.approx(special.logit(0.2))


def test_level_covariances_add_up():
    R = correlation_matrix()
    icc = [PIRLS_ICC[v] for v in PIRLS_VARIABLES]
    between, within = level_covariances(R, icc)
    np.testing.assert_allclose(np.diag(between), icc)
    np.testing.assert_allclose(between + within, R, atol=1e-10)


def test_pirls_like_profile():
    d = pirls_like(seed=20)
    frame = d.frame
    assert d.n_rows == PIRLS_N
    assert frame["ID"].nunique() == 475
    assert d.variables == PIRLS_VARIABLES
    rates = frame[list(PIRLS_VARIABLES)].isna().mean()
    assert rates["ReadAchiev"] == 0.0
    assert rates["CognAbility"] == 0.0
    assert rates["SES"] == pytest.approx(0.35, abs=0.02)
    assert rates["MathAchiev"] == pytest.approx(0.194, abs=0.02)
    assert rates["DisprMat"] == pytest.approx(0.614, abs=0.02)
    assert frame["ReadAchiev"].mean() == pytest.approx(500.0, abs=5.0)
