import logging

import numpy as np
import pytest

from mlmi_cli.exceptions import DivergenceError, NumericalError, UnknownParameterError, ValidationError
from mlmi_cli.imputation.formula import build_design, parse_formula
from mlmi_cli.imputation.mlmm_gibbs import (
    PHASE_BURNIN,
    PHASE_IMPUTATION,
    ChainStore,
    GibbsState,
    ImputationSpec,
    Prior,
    _check_finite,
    default_prior,
    draw_b,
    draw_beta,
    draw_psi,
    draw_sigma,
    impute_missing,
    init_state,
    parameter_names,
    prepare,
    run_chains,
    run_imputation,
)
from mlmi_cli.imputation.synthetic import ampute, generate_two_level
from mlmi_cli.utils.logger import PARENT_LOGGER, HumanReadableFormatter

pytestmark = pytest.mark.unit

FORMULA = "Y1 + Y2 ~ 1 + (1 | ID)"


@pytest.fixture(scope="module")
def complete():
    return generate_two_level(12, 6, [[0.0, 1.0]], 0.4 * np.eye(2), np.array([[1.0, 0.3], [0.3, 1.0]]), seed=11)


@pytest.fixture(scope="module")
def incomplete(complete):
    return ampute(complete, "MCAR", {"Y1": 0.2, "Y2": 0.3}, seed=12)


def _spec(dataset, **kwargs):
    options = {"seed": 7, "n_burn": 30, "n_between": 5, "m": 3, "trace_stride": 1}
    options.update(kwargs)
    return ImputationSpec(formula=parse_formula(FORMULA), dataset=dataset, **options)


def test_parameter_names_layout():
    names = parameter_names(p=2, q=1, r=2)
    assert names == (
        "Beta[1,1]",
        "Beta[1,2]",
        "Beta[2,1]",
        "Beta[2,2]",
        "Psi[1,1]",
        "Psi[2,1]",
        "Psi[2,2]",
        "Sigma[1,1]",
        "Sigma[2,1]",
        "Sigma[2,2]",
    )


def test_default_prior_is_data_scaled():
    prior = default_prior(r=2, q=2, variances=[4.0, 9.0])
    assert prior.nu_sigma == 2
    assert prior.nu_psi == 4
    np.testing.assert_array_equal(prior.lambda_sigma, np.diag([4.0, 9.0]))
    np.testing.assert_array_equal(prior.lambda_psi, np.diag([4.0, 4.0, 9.0, 9.0]))
    prior.validate(r=2, q=2)


def test_default_prior_rejects_constant_response():
    with pytest.raises(ValidationError, match="Response 2"):
        default_prior(r=2, q=1, variances=[1.0, 0.0])


def test_prior_validate_checks_shapes():
    prior = Prior(nu_sigma=1.0, lambda_sigma=np.eye(2), nu_psi=2.0, lambda_psi=np.eye(2))
    with pytest.raises(ValidationError, match="nu_sigma"):
        prior.validate(r=2, q=1)
    with pytest.raises(ValidationError, match="lambda_psi"):
        Prior(2.0, np.eye(2), 2.0, np.eye(3)).validate(r=2, q=1)


def test_prior_dict_form():
    prior = default_prior(r=2, q=1, variances=[1.0, 2.0])
    again = Prior.from_dict(prior.to_dict())
    np.testing.assert_array_equal(again.lambda_psi, prior.lambda_psi)
    assert again.nu_sigma == prior.nu_sigma


def test_spec_validation(complete):
    with pytest.raises(ValidationError, match="m must be"):
        _spec(complete, m=0).validate()
    with pytest.raises(ValidationError, match="seed"):
        _spec(complete, seed=None).validate()


def test_spec_config_form(complete):
    spec = _spec(complete, single_level=True)
    again = ImputationSpec.from_config(spec.to_config(), complete)
    assert again.to_config() == spec.to_config()


def test_complete_data_is_returned_unchanged(complete):
    result = run_imputation(_spec(complete))
    assert len(result.datasets) == 3
    for d in result.datasets:
        assert d.equals(complete)


def test_observed_values_are_kept(incomplete):
    result = run_imputation(_spec(incomplete))
    observed = ~np.isnan(incomplete.values(["Y1", "Y2"]))
    for d in result.datasets:
        values = d.values(["Y1", "Y2"])
        assert np.isfinite(values).all()
        np.testing.assert_array_equal(values[observed], incomplete.values(["Y1", "Y2"])[observed])


def test_imputations_differ_between_saves(incomplete):
    result = run_imputation(_spec(incomplete))
    first, second = (d.values(["Y1", "Y2"]) for d in result.datasets[:2])
    assert not np.array_equal(first, second)


def test_same_seed_is_bit_identical(incomplete):
    a = run_imputation(_spec(incomplete))
    b = run_imputation(_spec(incomplete))
    np.testing.assert_array_equal(a.chains.values, b.chains.values)
    for x, y in zip(a.datasets, b.datasets):
        assert x.equals(y)


def test_chain_store_phases(incomplete):
    result = run_imputation(_spec(incomplete, trace_stride=5))
    chains = result.chains
    assert chains.iterations.tolist() == list(range(5, 46, 5))
    assert (chains.phases[chains.iterations <= 30] == PHASE_BURNIN).all()
    assert (chains.phases[chains.iterations > 30] == PHASE_IMPUTATION).all()
    assert chains.burnin_end == 30
    assert chains.post_burnin("Sigma[1,1]").shape == (3,)
    assert result.n_iterations == 45


def test_unknown_trace_name(incomplete):
    result = run_imputation(_spec(incomplete))
    with pytest.raises(UnknownParameterError):
        result.chains.trace("Gamma[1,1]")


def test_single_level_mode_has_no_random_effects(incomplete):
    result = run_imputation(_spec(incomplete, single_level=True))
    assert not any(name.startswith("Psi") for name in result.chains.names)
    assert len(result.datasets) == 3


def test_progress_callback(incomplete):
    seen = []
    run_imputation(_spec(incomplete, n_burn=4, n_between=2, m=2), progress=lambda it, total: seen.append((it, total)))
    assert seen[0] == (1, 8)
    assert seen[-1] == (8, 8)


def test_missing_predictor_is_rejected(incomplete):
    spec = ImputationSpec(formula=parse_formula("Y1 ~ 1 + Y2 + (1 | ID)"), dataset=incomplete, seed=1)
    with pytest.raises(ValidationError, match="completely observed"):
        run_imputation(spec)


def test_partitioned_normal_conditional(complete):
    # Sigma = [[1, .5], [.5, 1]], observed deviation 1 -> mean 0.5, variance 0.75
    n = 20000
    frame = complete.frame.iloc[np.zeros(n, dtype=int)].reset_index(drop=True)
    frame["Y1"] = 1.0
    frame["Y2"] = np.nan
    d = type(complete)(frame, complete.group_col)
    design = build_design(parse_formula(FORMULA), d)
    state = GibbsState(
        beta=np.zeros((1, 2)),
        b=np.zeros((design.groups.J, 1, 2)),
        psi=np.eye(2),
        sigma=np.array([[1.0, 0.5], [0.5, 1.0]]),
        y=np.nan_to_num(design.Y),
        rng=np.random.default_rng(3),
    )
    y = impute_missing(state, design, prepare(design))
    assert y[:, 1].mean() == pytest.approx(0.5, abs=0.03)
    assert y[:, 1].var() == pytest.approx(0.75, abs=0.03)
    assert (y[:, 0] == 1.0).all()


def test_init_state_fills_with_observed_means(incomplete):
    design = build_design(parse_formula(FORMULA), incomplete)
    prior = default_prior(2, 1, [1.0, 1.0])
    state = init_state(design, prior, seed=1)
    filled = state.y[design.missing[:, 0], 0]
    assert np.allclose(filled, np.nanmean(design.Y[:, 0]))
    assert state.b.shape == (12, 1, 2)


def test_non_finite_draw_is_divergence(incomplete):
    design = build_design(parse_formula(FORMULA), incomplete)
    state = init_state(design, default_prior(2, 1, [1.0, 1.0]), seed=1)
    state.beta[0, 0] = np.inf
    with pytest.raises(DivergenceError) as err:
        _check_finite(state, iteration=17)
    assert err.value.iteration == 17


def test_run_chains_uses_consecutive_seeds(incomplete):
    results = run_chains(_spec(incomplete), n_chains=2, jobs=1)
    assert [r.spec.seed for r in results] == [7, 8]
    assert not np.array_equal(results[0].chains.values, results[1].chains.values)
    merged = ChainStore.merge([r.chains for r in results])
    assert merged.n_chains == 2
    assert merged.n_stored == 2 * results[0].chains.n_stored


def test_chain_store_file(incomplete, tmp_path):
    chains = run_imputation(_spec(incomplete)).chains
    chains.write(tmp_path / "chains.csv")
    again = ChainStore.read(tmp_path / "chains.csv")
    assert again.names == chains.names
    np.testing.assert_array_equal(again.values, chains.values)
    assert again.burnin_end == 30


@pytest.fixture(scope="module")
def unbalanced():
    return generate_two_level(4, [3, 5, 7, 9], [[0.3], [0.5]], 0.4, 0.8, seed=21)


def _state(design, beta, psi, sigma, seed=1, b=None):
    return GibbsState(
        beta=np.atleast_2d(np.asarray(beta, dtype=float)),
        b=np.zeros((design.groups.J, design.q, design.r)) if b is None else b,
        psi=np.atleast_2d(np.asarray(psi, dtype=float)),
        sigma=np.atleast_2d(np.asarray(sigma, dtype=float)),
        y=design.Y.copy(),
        rng=np.random.default_rng(seed),
    )


def _conjugate_moments(y, codes, J, psi, sigma):
    # scalar random intercept: var_j = 1 / (1/psi + n_j/sigma), mean_j = var_j * sum_j(y) / sigma
    n = np.bincount(codes, minlength=J)
    var = 1.0 / (1.0 / psi + n / sigma)
    return var * np.bincount(codes, weights=y, minlength=J) / sigma, var


def test_collinear_predictors_are_a_validation_error(unbalanced):
    d = unbalanced.with_column("x2", unbalanced.column("x1"))
    spec = ImputationSpec(formula=parse_formula("Y1 ~ 1 + x1 + x2 + (1 | ID)"), dataset=d, seed=1, n_burn=2, n_between=1, m=1)
    with pytest.raises(ValidationError, match="collinear"):
        run_imputation(spec)
    with pytest.raises(ValidationError, match="collinear"):
        prepare(build_design(spec.formula, d))


def test_random_intercepts_follow_the_scalar_conjugate(unbalanced):
    design = build_design(parse_formula("Y1 ~ 1 + (1 | ID)"), unbalanced)
    state = _state(design, beta=0.3, psi=0.4, sigma=0.8)
    cache = prepare(design)
    draws = np.array([draw_b(state, design, cache)[:, 0, 0] for _ in range(4000)])
    mean, var = _conjugate_moments(design.Y[:, 0] - 0.3, design.groups.codes, 4, 0.4, 0.8)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.03)
    np.testing.assert_allclose(draws.var(axis=0), var, rtol=0.1)


def test_tiny_psi_shrinks_random_effects_to_zero(unbalanced):
    design = build_design(parse_formula("Y1 ~ 1 + (1 | ID)"), unbalanced)
    state = _state(design, beta=0.3, psi=1e-12, sigma=0.8)
    b = draw_b(state, design)
    assert np.abs(b).max() < 1e-4


def test_tiny_sigma_collapses_beta_onto_least_squares(unbalanced):
    design = build_design(parse_formula("Y1 ~ 1 + x1 + (1 | ID)"), unbalanced)
    b = np.random.default_rng(2).standard_normal((4, 1, 1))
    state = _state(design, beta=[[0.0], [0.0]], psi=0.4, sigma=1e-14, b=b)
    beta = draw_beta(state, design)
    # Z is the intercept column, so Zb is b_j on every row of group j
    target = design.Y[:, 0] - b[design.groups.codes, 0, 0]
    expected = np.linalg.lstsq(design.X, target, rcond=None)[0]
    np.testing.assert_allclose(beta[:, 0], expected, atol=1e-5)


def test_sigma_draws_have_the_inverse_wishart_mean(complete):
    design = build_design(parse_formula(FORMULA), complete)
    prior = Prior(nu_sigma=2.0, lambda_sigma=0.5 * np.eye(2), nu_psi=2.0, lambda_psi=0.5 * np.eye(2))
    state = _state(design, beta=[[0.1, -0.2]], psi=np.eye(2), sigma=np.eye(2))
    E = design.Y - design.X @ state.beta
    expected = (prior.lambda_sigma + E.T @ E) / (prior.nu_sigma + design.n - 2 - 1)
    draws = np.array([draw_sigma(state, design, prior) for _ in range(4000)])
    np.testing.assert_allclose(draws.mean(axis=0), expected, rtol=0.05, atol=0.05 * np.abs(expected).max())


def test_psi_draws_have_the_inverse_wishart_mean():
    b = np.random.default_rng(3).standard_normal((200, 1, 2)) * np.array([1.0, 2.0])
    prior = Prior(nu_sigma=2.0, lambda_sigma=0.5 * np.eye(2), nu_psi=2.0, lambda_psi=0.5 * np.eye(2))
    state = GibbsState(beta=np.zeros((1, 2)), b=b, psi=np.eye(2), sigma=np.eye(2), y=np.zeros((1, 2)), rng=np.random.default_rng(4))
    V = b[:, 0, :]
    expected = (prior.lambda_psi + V.T @ V) / (prior.nu_psi + 200 - 2 - 1)
    draws = np.array([draw_psi(state, prior) for _ in range(4000)])
    np.testing.assert_allclose(draws.mean(axis=0), expected, rtol=0.05, atol=0.05 * np.abs(expected).max())


def test_diagonal_covariances_reduce_to_one_response_at_a_time(complete):
    design = build_design(parse_formula(FORMULA), complete)
    psi, sigma = np.array([0.4, 0.9]), np.array([0.8, 1.5])
    state = _state(design, beta=[[0.0, 0.0]], psi=np.diag(psi), sigma=np.diag(sigma), seed=5)
    cache = prepare(design)
    draws = np.array([draw_b(state, design, cache)[:, 0, :] for _ in range(3000)])
    for k in range(2):
        mean, var = _conjugate_moments(design.Y[:, k], design.groups.codes, design.groups.J, psi[k], sigma[k])
        np.testing.assert_allclose(draws[:, :, k].mean(axis=0), mean, atol=0.05)
        np.testing.assert_allclose(draws[:, :, k].var(axis=0), var, rtol=0.12)


def test_unfactorizable_precision_is_numerical_error(complete, mocker):
    design = build_design(parse_formula(FORMULA), complete)
    state = _state(design, beta=[[0.0, 0.0]], psi=np.eye(2), sigma=np.eye(2))
    mocker.patch("mlmi_cli.imputation.mlmm_gibbs.np.linalg.cholesky", side_effect=np.linalg.LinAlgError("not factorizable"))
    with pytest.raises(NumericalError, match="could not be factorized") as err:
        draw_b(state, design)
    assert isinstance(err.value.__cause__, np.linalg.LinAlgError)


class _Lines(logging.Handler):
    def __init__(self):
        super().__init__()
        self.lines = []

    def emit(self, record):
        self.lines.append(HumanReadableFormatter().format(record))


def test_sampler_logs_carry_seed_and_chain(incomplete):
    handler = _Lines()
    parent = logging.getLogger(PARENT_LOGGER)
    level = parent.level
    parent.addHandler(handler)
    parent.setLevel(logging.INFO)
    try:
        run_chains(_spec(incomplete, n_burn=4, n_between=2, m=2), n_chains=2, jobs=1)
    finally:
        parent.removeHandler(handler)
        parent.setLevel(level)
    started = [line for line in handler.lines if "Running Gibbs sampler" in line]
    assert started[0].startswith("[INFO] [chain=0 seed=7] ")
    assert started[1].startswith("[INFO] [chain=1 seed=8] ")
