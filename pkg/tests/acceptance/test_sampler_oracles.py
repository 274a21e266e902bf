"""Long-run behaviour of the Gibbs sampler against closed-form answers."""

import numpy as np
import pytest

from mlmi_cli.analysis.lmm_fit import AnalysisModel, fit_lmm
from mlmi_cli.analysis.pooling import pool_estimates
from mlmi_cli.imputation.formula import build_design, parse_formula
from mlmi_cli.imputation.mlmm_gibbs import FULL_SCAN, GibbsState, ImputationSpec, default_prior, init_state, observed_variances, prepare, run_imputation, scan
from mlmi_cli.imputation.synthetic import generate_two_level

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

EMPTY_MODEL = "Y1 ~ 1 + (1 | ID)"


def batch_means_se(draws: np.ndarray, n_batches: int = 50) -> float:
    usable = draws[draws.shape[0] % n_batches :]
    means = usable.reshape(n_batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def test_intercept_matches_gls_with_fixed_covariances():
    psi, sigma = 0.5, 1.0
    d = generate_two_level(30, [4, 6, 8, 10, 12] * 6, [[1.0]], [[psi]], [[sigma]], seed=31)
    design = build_design(parse_formula(EMPTY_MODEL), d)
    cache = prepare(design)
    state = GibbsState(
        beta=np.zeros((1, 1)),
        b=np.zeros((design.groups.J, 1, 1)),
        psi=np.array([[psi]]),
        sigma=np.array([[sigma]]),
        y=design.Y.copy(),
        rng=np.random.default_rng(4),
    )
    prior = default_prior(1, 1, observed_variances(design))

    draws = np.empty(20000)
    for t in range(draws.shape[0]):
        scan(state, design, prior, cache, steps=("b", "beta"))
        draws[t] = state.beta[0, 0]
    draws = draws[500:]

    y = design.Y[:, 0]
    means = np.array([y[rows].mean() for rows in design.groups.rows])
    weights = design.groups.sizes / (sigma + design.groups.sizes * psi)
    gls = float(np.sum(weights * means) / np.sum(weights))

    assert abs(draws.mean() - gls) < 3.0 * batch_means_se(draws)
    assert draws.var() == pytest.approx(1.0 / weights.sum(), rel=0.1)


def test_residual_variance_is_stationary_on_complete_data():
    d = generate_two_level(50, 10, [[0.0]], [[0.3]], [[1.0]], seed=32)
    design = build_design(parse_formula(EMPTY_MODEL), d)
    prior = default_prior(1, 1, observed_variances(design))
    state = init_state(design, prior, seed=5)
    cache = prepare(design)

    draws = []
    for t in range(6000):
        scan(state, design, prior, cache, steps=FULL_SCAN)
        if t >= 1000:
            draws.append(state.sigma[0, 0])

    reml = fit_lmm(AnalysisModel.from_text(EMPTY_MODEL), d)
    assert np.mean(draws) == pytest.approx(reml.sigma2, rel=0.05)


def test_complete_data_pipeline_is_the_identity():
    d = generate_two_level(20, 8, [[0.0], [0.5]], [[0.3]], [[1.0]], seed=33)
    spec = ImputationSpec(formula=parse_formula("Y1 ~ 1 + x1 + (1 | ID)"), dataset=d, seed=6, n_burn=50, n_between=5, m=5)
    result = run_imputation(spec)
    for imputed in result.datasets:
        assert imputed.equals(d)

    model = AnalysisModel.from_text("Y1 ~ 1 + x1 + (1 | ID)")
    single = fit_lmm(model, d)
    pooled = pool_estimates([fit_lmm(model, imputed) for imputed in result.datasets])
    for i, name in enumerate(single.fixed_names):
        row = pooled.parameter(name)
        assert row.estimate == pytest.approx(single.beta[i], abs=1e-12)
        assert row.se == pytest.approx(np.sqrt(single.vcov[i, i]), abs=1e-12)
        assert row.fmi == pytest.approx(0.0, abs=1e-12)
