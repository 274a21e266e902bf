"""
Synthetic two-level data with known parameters, missing-data mechanisms,
and a demo dataset shaped like a large-scale student assessment.
"""
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import optimize, special

from mlmi_cli.exceptions import ValidationError
from mlmi_cli.imputation.data_model import Dataset
from mlmi_cli.imputation.sampling import psd_factor, unvec
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

GROUP_COLUMN = "ID"
MECHANISMS = ("MCAR", "MAR")

# --- Demo data targets ---

PIRLS_N = 8767
PIRLS_GROUP_SIZES = (19,) * 217 + (18,) * 258

PIRLS_VARIABLES = ("MathAchiev", "ReadAchiev", "CognAbility", "SES", "DisprMat", "DisprRea", "SchoolClimate")

# Upper triangle of the observed-data correlation profile, row by row.
PIRLS_CORRELATIONS = {
    ("MathAchiev", "ReadAchiev"): 0.528,
    ("MathAchiev", "CognAbility"): 0.530,
    ("MathAchiev", "SES"): 0.232,
    ("MathAchiev", "DisprMat"): -0.234,
    ("MathAchiev", "DisprRea"): -0.238,
    ("MathAchiev", "SchoolClimate"): -0.217,
    ("ReadAchiev", "CognAbility"): 0.493,
    ("ReadAchiev", "SES"): 0.299,
    ("ReadAchiev", "DisprMat"): -0.291,
    ("ReadAchiev", "DisprRea"): -0.294,
    ("ReadAchiev", "SchoolClimate"): -0.327,
    ("CognAbility", "SES"): 0.240,
    ("CognAbility", "DisprMat"): -0.265,
    ("CognAbility", "DisprRea"): -0.251,
    ("CognAbility", "SchoolClimate"): -0.221,
    ("SES", "DisprMat"): -0.154,
    ("SES", "DisprRea"): -0.155,
    ("SES", "SchoolClimate"): -0.123,
    ("DisprMat", "DisprRea"): 0.782,
    ("DisprMat", "SchoolClimate"): 0.399,
    ("DisprRea", "SchoolClimate"): 0.419,
}

PIRLS_ICC = {
    "MathAchiev": 0.121,
    "ReadAchiev": 0.12,
    "CognAbility": 0.10,
    "SES": 0.122,
    "DisprMat": 0.179,
    "DisprRea": 0.18,
    "SchoolClimate": 0.20,
}

# (mean, sd) on the reporting scale
PIRLS_SCALES = {
    "MathAchiev": (500.0, 70.0),
    "ReadAchiev": (500.0, 70.0),
    "CognAbility": (100.0, 15.0),
    "SES": (0.0, 1.0),
    "DisprMat": (2.5, 0.6),
    "DisprRea": (2.5, 0.6),
    "SchoolClimate": (3.0, 0.5),
}

# Questionnaire nonresponse drops these together, more often for low cognitive ability.
NONRESPONSE_BLOCK = ("MathAchiev", "DisprMat", "DisprRea", "SchoolClimate")
NONRESPONSE_RATE = 0.188
SES_RATE = 0.35
PLANNED_MISSING_RATE = 0.5
ITEM_NONRESPONSE = {"MathAchiev": 0.0074, "DisprRea": 0.0333, "SchoolClimate": 0.0357, "DisprMat": 0.0493}
MAR_SLOPE = -0.4


@dataclass(frozen=True)
class TrueParameters:
    beta: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    response_names: Sequence[str]
    covariate_names: Sequence[str]
    group_sizes: Sequence[int]
    seed: int

    @property
    def q(self) -> int:
        return self.psi.shape[0] // self.sigma.shape[0]

    def icc(self) -> Dict[str, float]:
        """Intercept ICC per response: Psi entry of the response's intercept over that plus its residual variance."""
        out = {}
        for k, name in enumerate(self.response_names):
            between = float(self.psi[k * self.q, k * self.q]) if self.q else 0.0
            within = float(self.sigma[k, k])
            total = between + within
            out[name] = between / total if total > 0 else float("nan")
        return out

    def to_dict(self) -> Dict:
        return {
            "beta": self.beta.tolist(),
            "psi": self.psi.tolist(),
            "sigma": self.sigma.tolist(),
            "responses": list(self.response_names),
            "covariates": list(self.covariate_names),
            "groups": len(self.group_sizes),
            "group_sizes": [int(s) for s in self.group_sizes],
            "icc": self.icc(),
            "seed": self.seed,
        }


def _matrix(value, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(value, dtype=float))
    if matrix.shape[0] != matrix.shape[1]:
        raise ValidationError(f"{name} must be square, got {matrix.shape}")
    if not np.allclose(matrix, matrix.T):
        raise ValidationError(f"{name} must be symmetric")
    return matrix


def _group_sizes(J: int, n_per_group: Union[int, Sequence[int]]) -> np.ndarray:
    if J < 1:
        raise ValidationError("Number of groups must be >= 1")
    if np.isscalar(n_per_group):
        sizes = np.full(J, int(n_per_group))
    else:
        sizes = np.asarray(n_per_group, dtype=np.int64)
        if sizes.shape != (J,):
            raise ValidationError(f"Expected {J} group sizes, got {sizes.shape[0]}")
    if (sizes < 1).any():
        raise ValidationError("Group sizes must be >= 1")
    return sizes


def generate_two_level(
    J: int,
    n_per_group: Union[int, Sequence[int]],
    beta,
    psi,
    sigma,
    seed: int,
    response_names: Sequence[str] = None,
) -> Dataset:
    """
    Draw data from y_ij = x_ij beta + z_ij b_j + e_ij.

    beta is p x r; x_ij holds an intercept and p - 1 standard-normal covariates
    x1, x2, ...; z_ij is the first q columns of x_ij with q = dim(psi) / r.
    """
    return _generate(J, n_per_group, beta, psi, sigma, seed, response_names)[0]


def true_parameters(J: int, n_per_group, beta, psi, sigma, seed: int, response_names: Sequence[str] = None) -> TrueParameters:
    return _generate(J, n_per_group, beta, psi, sigma, seed, response_names, draw=False)[1]


def _generate(J, n_per_group, beta, psi, sigma, seed, response_names, draw: bool = True):
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    p, r = beta.shape
    sigma = _matrix(sigma, "sigma")
    psi = _matrix(psi, "psi")
    if sigma.shape != (r, r):
        raise ValidationError(f"sigma must be {r}x{r} for {r} response(s)")
    if psi.shape[0] % r:
        raise ValidationError(f"psi dimension {psi.shape[0]} is not a multiple of r = {r}")
    q = psi.shape[0] // r
    if q > p:
        raise ValidationError(f"psi implies {q} random effects but the model has only {p} predictors")

    names = tuple(response_names) if response_names else tuple(f"Y{k + 1}" for k in range(r))
    if len(names) != r:
        raise ValidationError(f"Expected {r} response names")
    covariates = tuple(f"x{i}" for i in range(1, p))
    sizes = _group_sizes(J, n_per_group)
    params = TrueParameters(beta=beta, psi=psi, sigma=sigma, response_names=names, covariate_names=covariates, group_sizes=tuple(sizes), seed=seed)

    psi_factor = psd_factor(psi, "psi")
    sigma_factor = psd_factor(sigma, "sigma")
    if not draw:
        return None, params

    rng = np.random.default_rng(seed)
    n = int(sizes.sum())
    codes = np.repeat(np.arange(J), sizes)

    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))]) if p > 1 else np.ones((n, 1))
    b = np.stack([unvec(psi_factor @ rng.standard_normal(q * r), q) for _ in range(J)]) if q else np.zeros((J, 0, r))
    e = rng.standard_normal((n, r)) @ sigma_factor.T
    Y = X @ beta + np.einsum("nq,nqr->nr", X[:, :q], b[codes]) + e

    frame = pd.DataFrame({GROUP_COLUMN: (codes + 1).astype(str)})
    for k, name in enumerate(names):
        frame[name] = Y[:, k]
    for i, name in enumerate(covariates, start=1):
        frame[name] = X[:, i]
    logger.debug(f"Generated {n} rows in {J} groups (p={p}, q={q}, r={r})")
    return Dataset(frame, GROUP_COLUMN), params


# --- Missing data ---


def _standardize(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    return (values - values.mean()) / sd if sd > 0 else np.zeros_like(values)


def logistic_intercept(z: np.ndarray, slope: float, rate: float) -> float:
    """Intercept a with mean(expit(a + slope * z)) == rate."""
    if not 0.0 < rate < 1.0:
        raise ValidationError(f"Rate must lie in (0, 1), got {rate}")

    def gap(a):
        return float(np.mean(special.expit(a + slope * z))) - rate

    return float(optimize.bisect(gap, -50.0, 50.0, xtol=1e-12))


def _mar_probabilities(driver: np.ndarray, slope: float, rate: float) -> np.ndarray:
    z = _standardize(driver)
    return special.expit(logistic_intercept(z, slope, rate) + slope * z)


def ampute(
    d: Dataset,
    mechanism: str,
    rates: Mapping[str, float],
    mar_driver: Optional[str] = None,
    seed: int = None,
    slope: float = 1.0,
) -> Dataset:
    """
    Delete values under MCAR (Bernoulli(rate) per cell) or MAR (logistic in the
    standardized driver, intercept calibrated so the expected rate hits the target).
    """
    mechanism = mechanism.upper()
    if mechanism not in MECHANISMS:
        raise ValidationError(f"Unknown mechanism '{mechanism}' (expected MCAR or MAR)")
    for name, rate in rates.items():
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"Missing rate for '{name}' must lie in [0, 1), got {rate}")
        if name == d.group_col:
            raise ValidationError(f"The group column '{name}' cannot be amputed")
        if mar_driver is not None and name == mar_driver:
            raise ValidationError(f"Driver '{name}' would itself be amputed")
    d.require(list(rates))

    driver = None
    if mechanism == "MAR":
        if mar_driver is None:
            raise ValidationError("MAR amputation needs a driver variable")
        driver = d.column(mar_driver)
        if np.isnan(driver).any():
            raise ValidationError(f"Driver '{mar_driver}' must be fully observed")

    rng = np.random.default_rng(seed)
    frame = d.frame.copy()
    for name, rate in rates.items():
        u = rng.random(d.n_rows)
        if rate == 0.0:
            continue
        prob = rate if mechanism == "MCAR" else _mar_probabilities(driver, slope, rate)
        frame.loc[u < prob, name] = np.nan
    return Dataset(frame, d.group_col)


# --- Demo data ---


def correlation_matrix(variables: Sequence[str] = PIRLS_VARIABLES, pairs: Mapping = None) -> np.ndarray:
    pairs = PIRLS_CORRELATIONS if pairs is None else pairs
    k = len(variables)
    R = np.eye(k)
    for (a, b), value in pairs.items():
        i, j = variables.index(a), variables.index(b)
        R[i, j] = R[j, i] = value
    return R


def _nearest_correlation(matrix: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh(matrix)
    if eigval.min() >= floor:
        return matrix
    fixed = (eigvec * np.clip(eigval, floor, None)) @ eigvec.T
    d = np.sqrt(np.diag(fixed))
    return fixed / np.outer(d, d)


def level_covariances(R: np.ndarray, icc: np.ndarray):
    """
    Split a unit-variance correlation matrix into between- and within-group
    covariances with the given ICCs so that between + within == R.

    Both levels share one correlation matrix R_level = R / c, with
    c_ab = sqrt(icc_a icc_b) + sqrt((1 - icc_a)(1 - icc_b)).
    """
    icc = np.asarray(icc, dtype=float)
    between_sd = np.sqrt(icc)
    within_sd = np.sqrt(1.0 - icc)
    c = np.outer(between_sd, between_sd) + np.outer(within_sd, within_sd)
    R_level = _nearest_correlation(R / c)
    return R_level * np.outer(between_sd, between_sd), R_level * np.outer(within_sd, within_sd)


def pirls_like(seed: int) -> Dataset:
    """
    8,767 students in 475 classes, seven variables with the target correlation
    and ICC profile, and missing data from questionnaire nonresponse, an
    SES item depending on reading, a planned-missing design on DisprMat, and
    small item nonresponse.
    """
    rng = np.random.default_rng(seed)
    variables = list(PIRLS_VARIABLES)
    sizes = np.asarray(PIRLS_GROUP_SIZES)
    J, n = sizes.shape[0], int(sizes.sum())
    codes = np.repeat(np.arange(J), sizes)

    between, within = level_covariances(correlation_matrix(), [PIRLS_ICC[v] for v in variables])
    u = rng.standard_normal((J, len(variables))) @ psd_factor(between, "between-group covariance").T
    e = rng.standard_normal((n, len(variables))) @ psd_factor(within, "within-group covariance").T
    Z = u[codes] + e

    frame = pd.DataFrame({GROUP_COLUMN: (codes + 1).astype(str)})
    for k, name in enumerate(variables):
        mean, sd = PIRLS_SCALES[name]
        frame[name] = mean + sd * Z[:, k]

    # 1. Questionnaire nonresponse (MAR on cognitive ability)
    block = rng.random(n) < _mar_probabilities(frame["CognAbility"].to_numpy(), MAR_SLOPE, NONRESPONSE_RATE)
    # 2. SES item depends on reading achievement
    ses = rng.random(n) < _mar_probabilities(frame["ReadAchiev"].to_numpy(), MAR_SLOPE, SES_RATE)
    # 3. Planned missing design
    planned = rng.random(n) < PLANNED_MISSING_RATE
    # 4. Item nonresponse
    items = {name: rng.random(n) < rate for name, rate in ITEM_NONRESPONSE.items()}

    for name in NONRESPONSE_BLOCK:
        frame.loc[block, name] = np.nan
    frame.loc[ses, "SES"] = np.nan
    frame.loc[planned, "DisprMat"] = np.nan
    for name, mask in items.items():
        frame.loc[mask, name] = np.nan

    d = Dataset(frame, GROUP_COLUMN)
    rates = ", ".join(f"{v}={frame[v].isna().mean():.3f}" for v in variables if frame[v].isna().any())
    logger.debug(f"Demo data: {n} rows in {J} groups; missing rates {rates}")
    return d
