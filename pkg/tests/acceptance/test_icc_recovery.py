"""Multilevel imputation keeps the intraclass correlation; flat imputation shrinks it."""

import pytest

from mlmi_cli.analysis.lmm_fit import AnalysisModel, fit_all
from mlmi_cli.analysis.pooling import pool_estimates
from mlmi_cli.imputation.formula import parse_formula
from mlmi_cli.imputation.mlmm_gibbs import ImputationSpec, run_imputation
from mlmi_cli.imputation.synthetic import ampute, generate_two_level

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

TRUE_ICC = 0.2
FORMULA = "Y1 ~ 1 + (1 | ID)"


@pytest.fixture(scope="module")
def incomplete():
    complete = generate_two_level(100, 20, [[0.0]], [[TRUE_ICC]], [[1.0 - TRUE_ICC]], seed=41)
    return ampute(complete, "MCAR", {"Y1": 0.3}, seed=42)


def pooled_icc(dataset, single_level: bool) -> float:
    spec = ImputationSpec(formula=parse_formula(FORMULA), dataset=dataset, seed=43, n_burn=1000, n_between=50, m=20, single_level=single_level)
    result = run_imputation(spec)
    fits = fit_all(AnalysisModel.from_text(FORMULA), result.datasets, jobs=1)
    return pool_estimates(fits).components["ICC|ID"]


def test_multilevel_imputation_recovers_icc(incomplete):
    assert pooled_icc(incomplete, single_level=False) == pytest.approx(TRUE_ICC, abs=0.05)


def test_flat_imputation_underestimates_icc(incomplete):
    assert pooled_icc(incomplete, single_level=True) < TRUE_ICC - 0.05
