"""
Gibbs sampler for the multivariate linear mixed-effects model

    y_ij = x_ij beta + z_ij b_j + e_ij,   vec(b_j) ~ N(0, Psi),   e_ij ~ N(0, Sigma)

with a flat prior on beta and inverse-Wishart priors on Psi and Sigma.
One scan updates, in this order: missing responses, b_j, beta, Sigma, Psi.
"""
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from mlmi_cli.exceptions import DivergenceError, NumericalError, UnknownParameterError, ValidationError
from mlmi_cli.imputation.data_model import Dataset
from mlmi_cli.imputation.formula import DesignMatrices, ModelFormula, build_design, parse_formula
from mlmi_cli.imputation.sampling import (
    cholesky_lower,
    draw_inverse_wishart,
    draw_mvn_precision,
    is_positive_definite,
    symmetrize,
    unvec,
    vec,
)
from mlmi_cli.utils.logger import get_logger, run_context

logger = get_logger(__name__)

FULL_SCAN = ("impute", "b", "beta", "sigma", "psi")
PHASE_BURNIN = "burnin"
PHASE_IMPUTATION = "imputation"


# --- Types ---


@dataclass(frozen=True, eq=False)
class Prior:
    """Inverse-Wishart priors: Sigma ~ IW(nu_sigma, lambda_sigma), Psi ~ IW(nu_psi, lambda_psi)."""

    nu_sigma: float
    lambda_sigma: np.ndarray
    nu_psi: float
    lambda_psi: np.ndarray

    def validate(self, r: int, q: int) -> None:
        if self.lambda_sigma.shape != (r, r):
            raise ValidationError(f"lambda_sigma must be {r}x{r}, got {self.lambda_sigma.shape}")
        if self.lambda_psi.shape != (q * r, q * r):
            raise ValidationError(f"lambda_psi must be {q * r}x{q * r}, got {self.lambda_psi.shape}")
        if self.nu_sigma < r:
            raise ValidationError(f"nu_sigma ({self.nu_sigma}) must be at least r = {r}")
        if self.nu_psi < q * r:
            raise ValidationError(f"nu_psi ({self.nu_psi}) must be at least q*r = {q * r}")
        for name, scale in (("lambda_sigma", self.lambda_sigma), ("lambda_psi", self.lambda_psi)):
            if scale.size and (not np.allclose(scale, scale.T) or not is_positive_definite(scale)):
                raise ValidationError(f"{name} must be symmetric positive definite")

    def to_dict(self) -> Dict:
        return {
            "nu_sigma": float(self.nu_sigma),
            "lambda_sigma": self.lambda_sigma.tolist(),
            "nu_psi": float(self.nu_psi),
            "lambda_psi": self.lambda_psi.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Prior":
        return cls(
            nu_sigma=float(data["nu_sigma"]),
            lambda_sigma=np.atleast_2d(np.asarray(data["lambda_sigma"], dtype=float)),
            nu_psi=float(data["nu_psi"]),
            lambda_psi=np.asarray(data["lambda_psi"], dtype=float).reshape(
                (int(round(np.sqrt(np.size(data["lambda_psi"])))),) * 2
            ),
        )


@dataclass(eq=False)
class GibbsState:
    beta: np.ndarray  # p x r
    b: np.ndarray  # J x q x r
    psi: np.ndarray  # qr x qr
    sigma: np.ndarray  # r x r
    y: np.ndarray  # N x r, completed
    rng: np.random.Generator
    iteration: int = 0


@dataclass(frozen=True, eq=False)
class ImputationSpec:
    formula: ModelFormula
    dataset: Dataset
    seed: int
    n_burn: int = 5000
    n_between: int = 100
    m: int = 10
    prior: Optional[Prior] = None
    trace_stride: int = 10
    single_level: bool = False

    def validate(self) -> None:
        if self.n_burn < 0:
            raise ValidationError("n_burn must be >= 0")
        if self.n_between < 1:
            raise ValidationError("n_between must be >= 1")
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        if self.trace_stride < 1:
            raise ValidationError("trace_stride must be >= 1")
        if self.seed is None:
            raise ValidationError("An explicit seed is required")

    def to_config(self) -> Dict:
        return {
            "formula": self.formula.canonical(),
            "group": self.dataset.group_col,
            "n_burn": self.n_burn,
            "n_between": self.n_between,
            "m": self.m,
            "seed": self.seed,
            "trace_stride": self.trace_stride,
            "single_level": self.single_level,
            "prior": self.prior.to_dict() if self.prior is not None else None,
        }

    @classmethod
    def from_config(cls, config: Dict, dataset: Dataset) -> "ImputationSpec":
        prior = config.get("prior")
        return cls(
            formula=parse_formula(config["formula"]),
            dataset=dataset,
            seed=int(config["seed"]),
            n_burn=int(config.get("n_burn", 5000)),
            n_between=int(config.get("n_between", 100)),
            m=int(config.get("m", 10)),
            prior=Prior.from_dict(prior) if prior else None,
            trace_stride=int(config.get("trace_stride", 10)),
            single_level=bool(config.get("single_level", False)),
        )


@dataclass(eq=False)
class ChainStore:
    """Parameter traces, one row per stored iteration."""

    names: Tuple[str, ...]
    values: np.ndarray
    iterations: np.ndarray
    phases: np.ndarray
    chain_ids: np.ndarray
    burnin_end: int = 0

    @property
    def n_stored(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain_ids).size) if self.n_stored else 0

    def _column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownParameterError(f"Unknown parameter '{name}'") from None

    def trace(self, name: str, phase: str = None, chain: int = None) -> np.ndarray:
        keep = np.ones(self.n_stored, dtype=bool)
        if phase is not None:
            keep &= self.phases == phase
        if chain is not None:
            keep &= self.chain_ids == chain
        return self.values[keep, self._column(name)]

    def post_burnin(self, name: str, chain: int = None) -> np.ndarray:
        return self.trace(name, phase=PHASE_IMPUTATION, chain=chain)

    def chains(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.chain_ids))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.names))
        frame.insert(0, "chain", self.chain_ids)
        frame.insert(0, "phase", self.phases)
        frame.insert(0, "iteration", self.iterations)
        return frame

    def write(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def read(cls, path) -> "ChainStore":
        try:
            frame = pd.read_csv(path)
        except FileNotFoundError as e:
            raise ValidationError(f"Chain file not found: {path}") from e
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ValidationError(f"Chain file {path} could not be parsed: {e}") from e
        for col in ("iteration", "phase", "chain"):
            if col not in frame.columns:
                raise ValidationError(f"Chain file {path} lacks the '{col}' column")
        names = tuple(c for c in frame.columns if c not in ("iteration", "phase", "chain"))
        phases = frame["phase"].astype(str).to_numpy()
        iterations = frame["iteration"].to_numpy(dtype=np.int64)
        burnin = iterations[phases == PHASE_BURNIN]
        return cls(
            names=names,
            values=frame[list(names)].to_numpy(dtype=float),
            iterations=iterations,
            phases=phases,
            chain_ids=frame["chain"].to_numpy(dtype=np.int64),
            burnin_end=int(burnin.max()) if burnin.size else 0,
        )

    @classmethod
    def merge(cls, stores: Sequence["ChainStore"]) -> "ChainStore":
        """Stack independent chains; chain ids are renumbered 0..k-1."""
        if not stores:
            raise ValidationError("Nothing to merge")
        names = stores[0].names
        for store in stores[1:]:
            if store.names != names:
                raise ValidationError("Chains to merge must trace the same parameters")
        return cls(
            names=names,
            values=np.vstack([s.values for s in stores]),
            iterations=np.concatenate([s.iterations for s in stores]),
            phases=np.concatenate([s.phases for s in stores]),
            chain_ids=np.concatenate([np.full(s.n_stored, k, dtype=np.int64) for k, s in enumerate(stores)]),
            burnin_end=max(s.burnin_end for s in stores),
        )


@dataclass(eq=False)
class ImputationResult:
    datasets: List[Dataset]
    chains: ChainStore
    spec: ImputationSpec
    prior: Prior
    n_iterations: int
    elapsed_seconds: float = field(default=0.0)


# --- Precomputation ---


@dataclass(frozen=True, eq=False)
class SamplerCache:
    indicator: object  # J x N sparse
    ZtZ: np.ndarray  # J x q x q
    XtX_inv: np.ndarray
    XtX_inv_chol: np.ndarray
    patterns: Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...]


def check_fixed_design(design: DesignMatrices) -> None:
    if np.linalg.matrix_rank(design.X) < design.p:
        raise ValidationError("X'X is singular: remove collinear predictors from the fixed part of the model")


def prepare(design: DesignMatrices) -> SamplerCache:
    check_fixed_design(design)
    n, q = design.n, design.q
    G = design.groups.indicator()
    ZZ = (design.Z[:, :, None] * design.Z[:, None, :]).reshape(n, q * q)
    ZtZ = np.asarray(G @ ZZ).reshape(design.groups.J, q, q)

    XtX = design.X.T @ design.X
    XtX_inv = symmetrize(linalg.inv(XtX))

    patterns = []
    flags, inverse = np.unique(design.missing, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for k, flag in enumerate(flags):
        if not flag.any():
            continue
        rows = np.flatnonzero(inverse == k)
        patterns.append((rows, np.flatnonzero(flag), np.flatnonzero(~flag)))

    return SamplerCache(
        indicator=G,
        ZtZ=ZtZ,
        XtX_inv=XtX_inv,
        XtX_inv_chol=cholesky_lower(XtX_inv, "(X'X)^-1"),
        patterns=tuple(patterns),
    )


def _inverse(matrix: np.ndarray, what: str) -> np.ndarray:
    L = cholesky_lower(matrix, what)
    return symmetrize(linalg.cho_solve((L, True), np.eye(matrix.shape[0])))


def _zb(design: DesignMatrices, b: np.ndarray) -> np.ndarray:
    if design.q == 0:
        return np.zeros((design.n, design.r))
    return np.einsum("nq,nqr->nr", design.Z, b[design.groups.codes])


# --- Parameter names ---


def parameter_names(p: int, q: int, r: int) -> Tuple[str, ...]:
    names = [f"Beta[{i + 1},{j + 1}]" for i in range(p) for j in range(r)]
    rows, cols = np.tril_indices(q * r)
    names += [f"Psi[{i + 1},{j + 1}]" for i, j in zip(rows, cols)]
    rows, cols = np.tril_indices(r)
    names += [f"Sigma[{i + 1},{j + 1}]" for i, j in zip(rows, cols)]
    return tuple(names)


def parameter_vector(state: GibbsState) -> np.ndarray:
    return np.concatenate(
        [
            state.beta.ravel(),
            state.psi[np.tril_indices(state.psi.shape[0])],
            state.sigma[np.tril_indices(state.sigma.shape[0])],
        ]
    )


# --- Operations ---


def observed_variances(design: DesignMatrices) -> np.ndarray:
    counts = (~design.missing).sum(axis=0)
    variances = np.full(design.r, np.nan)
    for k in range(design.r):
        if counts[k] >= 2:
            variances[k] = np.nanvar(design.Y[:, k], ddof=1)
    return variances


def default_prior(r: int, q: int, variances) -> Prior:
    """nu = dimension, scales = diagonal observed-case variances (replicated per random-effect block)."""
    if r < 1:
        raise ValidationError("r must be >= 1")
    if q < 0:
        raise ValidationError("q must be >= 0")
    variances = np.asarray(variances, dtype=float).reshape(-1)
    if variances.shape != (r,):
        raise ValidationError(f"Expected {r} response variances, got {variances.shape[0]}")
    bad = ~np.isfinite(variances) | (variances <= 0)
    if bad.any():
        raise ValidationError(
            f"Response {int(np.flatnonzero(bad)[0]) + 1} has zero (or undefined) observed variance; the prior scale would be degenerate"
        )
    return Prior(
        nu_sigma=float(r),
        lambda_sigma=np.diag(variances),
        nu_psi=float(q * r),
        lambda_psi=np.diag(np.repeat(variances, q)),
    )


def init_state(design: DesignMatrices, prior: Prior, seed: int) -> GibbsState:
    """Mean-fill missing cells, OLS for beta, b_j = 0, covariances at the prior scales."""
    y = design.Y.copy()
    for k in range(design.r):
        observed = ~design.missing[:, k]
        if not observed.any():
            raise ValidationError(f"Response '{design.response_names[k]}' has no observed values")
        y[~observed, k] = y[observed, k].mean()

    check_fixed_design(design)
    beta = linalg.solve(design.X.T @ design.X, design.X.T @ y, assume_a="pos")

    return GibbsState(
        beta=beta,
        b=np.zeros((design.groups.J, design.q, design.r)),
        psi=prior.lambda_psi.copy(),
        sigma=prior.lambda_sigma.copy(),
        y=y,
        rng=np.random.default_rng(seed),
    )


def draw_b(state: GibbsState, design: DesignMatrices, cache: SamplerCache = None) -> np.ndarray:
    """vec(b_j) ~ N(U_j vec(Z_j'(Y_j - X_j beta) Sigma^-1), U_j), U_j^-1 = Psi^-1 + Sigma^-1 (x) Z_j'Z_j."""
    if design.q == 0:
        return state.b
    cache = cache or prepare(design)
    J, q, r, n = design.groups.J, design.q, design.r, design.n

    sigma_inv = _inverse(state.sigma, "Sigma")
    psi_inv = _inverse(state.psi, "Psi")

    resid = state.y - design.X @ state.beta
    ZR = (design.Z[:, :, None] * resid[:, None, :]).reshape(n, q * r)
    ZtR = np.asarray(cache.indicator @ ZR).reshape(J, q, r)
    rhs = vec(ZtR @ sigma_inv)

    precision = psi_inv[None, :, :] + np.einsum("ab,jcd->jacbd", sigma_inv, cache.ZtZ).reshape(J, r * q, r * q)
    try:
        L = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as e:
        for j in range(J):
            if not is_positive_definite(precision[j]):
                raise NumericalError(f"Random-effects precision is not positive definite for group '{design.groups.labels[j]}'") from e
        raise NumericalError("Random-effects precision could not be factorized") from e

    mean = np.linalg.solve(np.swapaxes(L, 1, 2), np.linalg.solve(L, rhs[..., None]))[..., 0]
    state.b = np.ascontiguousarray(unvec(draw_mvn_precision(state.rng, mean, L), q))
    return state.b


def draw_beta(state: GibbsState, design: DesignMatrices, cache: SamplerCache = None) -> np.ndarray:
    """vec(beta) ~ N(vec(beta_hat), Sigma (x) (X'X)^-1) under a flat prior."""
    cache = cache or prepare(design)
    resid = state.y - _zb(design, state.b)
    beta_hat = cache.XtX_inv @ (design.X.T @ resid)
    Ls = cholesky_lower(state.sigma, "Sigma")
    E = state.rng.standard_normal((design.p, design.r))
    state.beta = beta_hat + cache.XtX_inv_chol @ E @ Ls.T
    return state.beta


def residuals(state: GibbsState, design: DesignMatrices) -> np.ndarray:
    return state.y - design.X @ state.beta - _zb(design, state.b)


def draw_sigma(state: GibbsState, design: DesignMatrices, prior: Prior) -> np.ndarray:
    """Sigma^-1 ~ Wishart(nu_sigma + N, (lambda_sigma + sum_j E_j'E_j)^-1)."""
    E = residuals(state, design)
    scale = prior.lambda_sigma + E.T @ E
    state.sigma = draw_inverse_wishart(state.rng, prior.nu_sigma + design.n, scale, what="Sigma")
    return state.sigma


def draw_psi(state: GibbsState, prior: Prior) -> np.ndarray:
    """Psi^-1 ~ Wishart(nu_psi + J, (lambda_psi + sum_j vec(b_j) vec(b_j)')^-1)."""
    if state.b.shape[1] == 0:
        return state.psi
    V = vec(state.b)
    scale = prior.lambda_psi + V.T @ V
    state.psi = draw_inverse_wishart(state.rng, prior.nu_psi + V.shape[0], scale, what="Psi")
    return state.psi


def impute_missing(state: GibbsState, design: DesignMatrices, cache: SamplerCache = None) -> np.ndarray:
    """Draw y_mis | y_obs from the partitioned normal with mean x beta + z b_j and covariance Sigma."""
    cache = cache or prepare(design)
    if not cache.patterns:
        return state.y
    mu = design.X @ state.beta + _zb(design, state.b)
    sigma = state.sigma

    for rows, mis, obs in cache.patterns:
        z = state.rng.standard_normal((rows.shape[0], mis.shape[0]))
        mu_mis = mu[np.ix_(rows, mis)]
        if obs.size == 0:
            L = cholesky_lower(sigma, "Sigma")
            state.y[np.ix_(rows, mis)] = mu_mis + z @ L.T
            continue

        S_oo = sigma[np.ix_(obs, obs)]
        S_mo = sigma[np.ix_(mis, obs)]
        try:
            L_oo = linalg.cholesky(S_oo, lower=True)
        except linalg.LinAlgError:
            raise NumericalError(f"Observed block of Sigma is singular for row {int(rows[0]) + 1}") from None
        K = linalg.cho_solve((L_oo, True), S_mo.T).T
        cond = symmetrize(sigma[np.ix_(mis, mis)] - K @ S_mo.T)
        L_c = cholesky_lower(cond, f"conditional covariance for row {int(rows[0]) + 1}")

        dev = state.y[np.ix_(rows, obs)] - mu[np.ix_(rows, obs)]
        state.y[np.ix_(rows, mis)] = mu_mis + dev @ K.T + z @ L_c.T
    return state.y


def scan(state: GibbsState, design: DesignMatrices, prior: Prior, cache: SamplerCache = None, steps: Sequence[str] = FULL_SCAN) -> GibbsState:
    """One full-conditional scan; ``steps`` restricts which updates run (order stays fixed)."""
    cache = cache or prepare(design)
    for step in FULL_SCAN:
        if step not in steps:
            continue
        if step == "impute":
            impute_missing(state, design, cache)
        elif step == "b":
            draw_b(state, design, cache)
        elif step == "beta":
            draw_beta(state, design, cache)
        elif step == "sigma":
            draw_sigma(state, design, prior)
        elif step == "psi":
            draw_psi(state, prior)
    state.iteration += 1
    return state


def _check_finite(state: GibbsState, iteration: int) -> None:
    for name, value in (("beta", state.beta), ("Sigma", state.sigma), ("Psi", state.psi), ("imputed values", state.y)):
        if not np.all(np.isfinite(value)):
            raise DivergenceError(f"Non-finite draw in {name}; the imputation model may be misspecified", iteration=iteration)


def run_imputation(spec: ImputationSpec, progress: Callable[[int, int], None] = None) -> ImputationResult:
    """Burn-in, then save a completed dataset every n_between scans until m are collected."""
    spec.validate()
    with run_context(seed=spec.seed):
        return _sample(spec, progress)


def _sample(spec: ImputationSpec, progress: Optional[Callable[[int, int], None]]) -> ImputationResult:
    design = build_design(spec.formula, spec.dataset, single_level=spec.single_level)
    prior = spec.prior if spec.prior is not None else default_prior(design.r, design.q, observed_variances(design))
    prior.validate(design.r, design.q)

    cache = prepare(design)
    state = init_state(design, prior, spec.seed)
    names = parameter_names(design.p, design.q, design.r)

    total = spec.n_burn + spec.m * spec.n_between
    capacity = total // spec.trace_stride
    values = np.empty((capacity, len(names)))
    iterations = np.empty(capacity, dtype=np.int64)
    stored = 0

    datasets = []
    report_every = max(1, total // 10)
    logger.info(
        f"Running Gibbs sampler: {spec.n_burn} burn-in + {spec.m} x {spec.n_between} iterations "
        f"(N={design.n}, J={design.groups.J}, r={design.r}, p={design.p}, q={design.q})"
    )
    start = time.perf_counter()

    for it in range(1, total + 1):
        try:
            scan(state, design, prior, cache)
        except DivergenceError:
            raise
        except NumericalError as e:
            raise NumericalError(f"Iteration {it}: {e}") from e
        _check_finite(state, it)

        if it % spec.trace_stride == 0:
            values[stored] = parameter_vector(state)
            iterations[stored] = it
            stored += 1

        if it > spec.n_burn and (it - spec.n_burn) % spec.n_between == 0:
            datasets.append(spec.dataset.with_values(design.response_names, state.y.copy()))

        if progress is not None:
            progress(it, total)
        if it % report_every == 0:
            logger.info(f"Iteration {it}/{total}")

    elapsed = time.perf_counter() - start
    logger.info(f"Sampler finished {total} iterations in {elapsed:.1f}s; saved {len(datasets)} imputed data sets")

    phases = np.where(iterations[:stored] <= spec.n_burn, PHASE_BURNIN, PHASE_IMPUTATION)
    chains = ChainStore(
        names=names,
        values=values[:stored],
        iterations=iterations[:stored],
        phases=phases,
        chain_ids=np.zeros(stored, dtype=np.int64),
        burnin_end=spec.n_burn,
    )
    return ImputationResult(datasets=datasets, chains=chains, spec=spec, prior=prior, n_iterations=total, elapsed_seconds=elapsed)


def _run_chain(spec: ImputationSpec, seed: int, chain: int) -> ImputationResult:
    with run_context(chain=chain):
        return run_imputation(replace(spec, seed=seed))


def run_chains(spec: ImputationSpec, n_chains: int, jobs: int = None) -> List[ImputationResult]:
    """Independent chains with seeds seed, seed+1, ...; parallel across chains only."""
    if n_chains < 1:
        raise ValidationError("n_chains must be >= 1")
    seeds = [spec.seed + k for k in range(n_chains)]
    if jobs == 1 or n_chains == 1:
        return [_run_chain(spec, s, k) for k, s in enumerate(seeds)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_chain, [spec] * n_chains, seeds, range(n_chains)))
