"""
ML / REML fits of univariate two-level linear mixed models.

    y_j = X_j beta + Z_j u_j + e_j,   u_j ~ N(0, G),   e_j ~ N(0, sigma2 I)

G = sigma2 T T' with T lower triangular. The deviance is profiled over beta
and sigma2, leaving theta = (log diag(T), strict lower triangle of T) for a
Nelder-Mead search. For each theta, with A_j = I + T' Z_j'Z_j T, Woodbury
gives every cross-product of the scaled inverse covariance in closed form.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg, optimize

from mlmi_cli.exceptions import ConvergenceError, NumericalError, ValidationError
from mlmi_cli.imputation.data_model import Dataset
from mlmi_cli.imputation.formula import INTERCEPT, DesignMatrices, ModelFormula, build_design, parse_formula
from mlmi_cli.utils.common import from_json_number, json_number
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

METHODS = ("REML", "ML")
RESIDUAL = "Residual~~Residual"

XATOL = 1e-10
FATOL_REL = 1e-9
MAX_EVALUATIONS = 10_000
BOUNDARY = 1e-8
SUSPECT_BOUNDARY = 1e-4


@dataclass(frozen=True)
class AnalysisModel:
    formula: ModelFormula
    method: str = "REML"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"Unknown estimation method '{self.method}' (expected REML or ML)")
        if len(self.formula.responses) != 1:
            raise ValidationError("Analysis models take exactly one response")
        if not self.formula.has_random:
            raise ValidationError("Analysis models need one random-effects block '( 1 | group )'")

    @classmethod
    def from_text(cls, formula: str, method: str = "REML") -> "AnalysisModel":
        return cls(parse_formula(formula), method.upper())


def _label(name: str) -> str:
    return "Intercept" if name == INTERCEPT else name


@dataclass(frozen=True, eq=False)
class LmmFit:
    formula: str
    method: str
    fixed_names: Tuple[str, ...]
    beta: np.ndarray
    vcov: np.ndarray
    random_names: Tuple[str, ...]
    group: str
    re_cov: np.ndarray
    sigma2: float
    loglik: float
    deviance: float
    n_obs: int
    n_groups: int
    converged: bool = True
    boundary: bool = False
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_evaluations: int = 0

    @property
    def p(self) -> int:
        return len(self.fixed_names)

    @property
    def q(self) -> int:
        return len(self.random_names)

    @property
    def df_com(self) -> int:
        return self.n_obs - self.p

    @property
    def n_params(self) -> int:
        return self.p + self.q * (self.q + 1) // 2 + 1

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def intercept_only(self) -> bool:
        return self.random_names == (INTERCEPT,)

    def estimates(self) -> Dict[str, float]:
        return {name: float(v) for name, v in zip(self.fixed_names, self.beta)}

    def components(self) -> Dict[str, float]:
        """Named variance components, lme4-style: 'Intercept~~x|ID', ..., 'Residual~~Residual' (+ 'ICC|ID')."""
        out = {}
        for i in range(self.q):
            for j in range(i, self.q):
                out[f"{_label(self.random_names[i])}~~{_label(self.random_names[j])}|{self.group}"] = float(self.re_cov[i, j])
        out[RESIDUAL] = float(self.sigma2)
        if self.intercept_only:
            out[f"ICC|{self.group}"] = icc(self)
        return out

    def to_dict(self) -> Dict:
        return {
            "formula": self.formula,
            "method": self.method,
            "fixed_names": list(self.fixed_names),
            "beta": [json_number(v) for v in self.beta],
            "vcov": [[json_number(v) for v in row] for row in self.vcov],
            "random_names": list(self.random_names),
            "group": self.group,
            "re_cov": [[json_number(v) for v in row] for row in self.re_cov],
            "sigma2": json_number(self.sigma2),
            "loglik": json_number(self.loglik),
            "deviance": json_number(self.deviance),
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
            "df_com": self.df_com,
            "converged": self.converged,
            "boundary": self.boundary,
            "theta": [json_number(v) for v in self.theta],
            "n_evaluations": self.n_evaluations,
            "components": {k: json_number(v) for k, v in self.components().items()},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "LmmFit":
        try:
            return cls(
                formula=data["formula"],
                method=data["method"],
                fixed_names=tuple(data["fixed_names"]),
                beta=np.array([from_json_number(v) for v in data["beta"]], dtype=float),
                vcov=np.array([[from_json_number(v) for v in row] for row in data["vcov"]], dtype=float).reshape(len(data["beta"]), -1),
                random_names=tuple(data["random_names"]),
                group=data["group"],
                re_cov=np.array([[from_json_number(v) for v in row] for row in data["re_cov"]], dtype=float).reshape(len(data["random_names"]), -1),
                sigma2=from_json_number(data["sigma2"]),
                loglik=from_json_number(data["loglik"]),
                deviance=from_json_number(data["deviance"]),
                n_obs=int(data["n_obs"]),
                n_groups=int(data["n_groups"]),
                converged=bool(data.get("converged", True)),
                boundary=bool(data.get("boundary", False)),
                theta=np.array([from_json_number(v) for v in data.get("theta", [])], dtype=float),
                n_evaluations=int(data.get("n_evaluations", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Malformed fit record: {e}") from e


# --- Profiled deviance ---


@dataclass(frozen=True, eq=False)
class _CrossProducts:
    XtX: np.ndarray
    Xty: np.ndarray
    yty: float
    ZtZ: np.ndarray  # J x q x q
    ZtX: np.ndarray  # J x q x p
    Zty: np.ndarray  # J x q
    n: int
    p: int
    q: int


def _cross_products(design: DesignMatrices) -> _CrossProducts:
    X, Z, y = design.X, design.Z, design.Y[:, 0]
    G = design.groups.indicator()
    n, p, q, J = design.n, design.p, design.q, design.groups.J
    ZtZ = np.asarray(G @ (Z[:, :, None] * Z[:, None, :]).reshape(n, q * q)).reshape(J, q, q)
    ZtX = np.asarray(G @ (Z[:, :, None] * X[:, None, :]).reshape(n, q * p)).reshape(J, q, p)
    Zty = np.asarray(G @ (Z * y[:, None]))
    return _CrossProducts(XtX=X.T @ X, Xty=X.T @ y, yty=float(y @ y), ZtZ=ZtZ, ZtX=ZtX, Zty=Zty, n=n, p=p, q=q)


def _relative_factor(theta: np.ndarray, q: int, zero_diag: np.ndarray = None) -> np.ndarray:
    T = np.zeros((q, q))
    diag = np.exp(theta[:q])
    if zero_diag is not None:
        diag = np.where(zero_diag, 0.0, diag)
    T[np.diag_indices(q)] = diag
    T[np.tril_indices(q, k=-1)] = theta[q:]
    return T


@dataclass(frozen=True)
class _Profile:
    deviance: float
    beta: np.ndarray
    sigma2: float
    XtWX: np.ndarray


def _profile(T: np.ndarray, cp: _CrossProducts, reml: bool) -> _Profile:
    q = cp.q
    A = np.eye(q)[None] + np.einsum("ab,jbc,cd->jad", T.T, cp.ZtZ, T)
    L = np.linalg.cholesky(A)
    logdet_A = 2.0 * float(np.sum(np.log(np.diagonal(L, axis1=1, axis2=2))))

    M = np.einsum("ab,jbp->jap", T.T, cp.ZtX)  # T'Z_j'X_j
    m = np.einsum("ab,jb->ja", T.T, cp.Zty)  # T'Z_j'y_j
    LM = np.linalg.solve(L, M)
    Lm = np.linalg.solve(L, m[..., None])[..., 0]

    XtWX = cp.XtX - np.einsum("jap,jaq->pq", LM, LM)
    XtWy = cp.Xty - np.einsum("jap,ja->p", LM, Lm)
    ytWy = cp.yty - float(np.sum(Lm * Lm))

    try:
        C = linalg.cholesky(XtWX, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError("Fixed-effects cross-product is singular; remove collinear predictors") from e
    beta = linalg.cho_solve((C, True), XtWy)
    rss = max(ytWy - float(beta @ XtWy), 0.0)

    if reml:
        dof = cp.n - cp.p
        sigma2 = rss / dof
        logdet_X = 2.0 * float(np.sum(np.log(np.diag(C))))
        deviance = logdet_A + logdet_X + dof * (1.0 + np.log(2.0 * np.pi * sigma2))
    else:
        sigma2 = rss / cp.n
        deviance = logdet_A + cp.n * (1.0 + np.log(2.0 * np.pi * sigma2))
    return _Profile(deviance=float(deviance), beta=beta, sigma2=float(sigma2), XtWX=XtWX)


def _minimize(objective, x0: np.ndarray, scale: float):
    simplex = np.vstack([x0, x0 + 0.5 * np.eye(x0.shape[0])])
    return optimize.minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options={
            "xatol": XATOL,
            "fatol": FATOL_REL * max(1.0, abs(scale)),
            "maxfev": MAX_EVALUATIONS,
            "initial_simplex": simplex,
        },
    )


def _build_fit(model: AnalysisModel, design: DesignMatrices, T: np.ndarray, prof: _Profile, theta, converged, boundary, n_eval) -> LmmFit:
    vcov = prof.sigma2 * linalg.inv(prof.XtWX)
    vcov = 0.5 * (vcov + vcov.T)
    re_cov = prof.sigma2 * (T @ T.T)
    return LmmFit(
        formula=model.formula.canonical(),
        method=model.method,
        fixed_names=design.fixed_names,
        beta=prof.beta,
        vcov=vcov,
        random_names=design.random_names,
        group=model.formula.group,
        re_cov=0.5 * (re_cov + re_cov.T),
        sigma2=prof.sigma2,
        loglik=-0.5 * prof.deviance,
        deviance=prof.deviance,
        n_obs=design.n,
        n_groups=design.groups.J,
        converged=converged,
        boundary=boundary,
        theta=np.asarray(theta, dtype=float),
        n_evaluations=n_eval,
    )


def _analysis_design(model: AnalysisModel, d: Dataset) -> DesignMatrices:
    design = build_design(model.formula, d)
    if np.isnan(design.Y).any():
        raise ValidationError(f"Response '{design.response_names[0]}' has missing values; fit analysis models to completed data")
    if design.groups.J < 2:
        raise ValidationError("At least two groups are needed to separate the variance components")
    if design.n <= design.p:
        raise ValidationError(f"Need more observations ({design.n}) than fixed effects ({design.p})")
    if np.linalg.matrix_rank(design.X) < design.p:
        raise ValidationError("Fixed-effects design is singular; remove collinear predictors")
    return design


def fit_lmm(model: AnalysisModel, d: Dataset) -> LmmFit:
    """Minimize the profiled (REML) deviance over theta."""
    design = _analysis_design(model, d)
    cp = _cross_products(design)
    reml = model.method == "REML"
    q = design.q

    def objective(theta):
        try:
            return _profile(_relative_factor(theta, q), cp, reml).deviance
        except (NumericalError, np.linalg.LinAlgError):
            return np.inf

    # 1. Search from T = I
    x0 = np.zeros(q + q * (q - 1) // 2)
    start = objective(x0)
    result = _minimize(objective, x0, start)
    best, n_eval, converged = result.x, int(result.nfev), bool(result.success)

    # 2. Restart away from a suspected boundary
    if np.any(np.exp(best[:q]) < SUSPECT_BOUNDARY):
        retry = best.copy()
        retry[:q] = np.where(np.exp(best[:q]) < SUSPECT_BOUNDARY, np.log(0.1), best[:q])
        second = _minimize(objective, retry, start)
        n_eval += int(second.nfev)
        if second.fun < result.fun:
            best, converged = second.x, bool(second.success)

    # 3. Boundary solutions: tiny diagonals are zero variances
    zero_diag = np.exp(best[:q]) < BOUNDARY
    boundary = bool(zero_diag.any())
    if boundary:
        converged = True
    T = _relative_factor(best, q, zero_diag)
    prof = _profile(T, cp, reml)
    fit = _build_fit(model, design, T, prof, best, converged, boundary, n_eval)

    if not converged:
        raise ConvergenceError(f"Optimizer did not converge after {n_eval} deviance evaluations", best=fit)
    logger.debug(f"{model.method} fit of '{fit.formula}': deviance {fit.deviance:.6f} after {n_eval} evaluations")
    return fit


def icc(fit: LmmFit) -> float:
    """Var(u0) / (Var(u0) + Var(e)) for a random-intercept-only fit."""
    if not fit.intercept_only:
        raise ValidationError("ICC is defined for intercept-only random-effects models")
    between = float(fit.re_cov[0, 0])
    total = between + fit.sigma2
    return between / total if total > 0 else 0.0


def loglik_at(model: AnalysisModel, d: Dataset, beta, re_cov, sigma2: float) -> float:
    """Exact ML log-likelihood at the given parameters (no optimization)."""
    design = build_design(model.formula, d)
    if np.isnan(design.Y).any():
        raise ValidationError("Response has missing values")
    beta = np.asarray(beta, dtype=float).reshape(-1)
    G = np.atleast_2d(np.asarray(re_cov, dtype=float))
    if beta.shape != (design.p,):
        raise ValidationError(f"Expected {design.p} fixed effects, got {beta.shape[0]}")
    if G.shape != (design.q, design.q):
        raise ValidationError(f"Random-effects covariance must be {design.q}x{design.q}")
    if not np.allclose(G, G.T) or np.linalg.eigvalsh(G).min() < -1e-10 * max(1.0, float(np.abs(G).max())):
        raise ValidationError("Random-effects covariance is not positive semidefinite")
    if not sigma2 > 0:
        raise ValidationError("Residual variance must be positive")

    resid = design.Y[:, 0] - design.X @ beta
    total = 0.0
    for rows in design.groups.rows:
        Zj = design.Z[rows]
        V = Zj @ G @ Zj.T + sigma2 * np.eye(rows.shape[0])
        try:
            L = linalg.cholesky(V, lower=True)
        except linalg.LinAlgError as e:
            raise NumericalError("Marginal covariance is not positive definite") from e
        z = linalg.solve_triangular(L, resid[rows], lower=True)
        total += -0.5 * (rows.shape[0] * np.log(2.0 * np.pi) + 2.0 * float(np.sum(np.log(np.diag(L)))) + float(z @ z))
    return float(total)


def fit_all(model: AnalysisModel, datasets: List[Dataset], jobs: Optional[int] = None) -> List[LmmFit]:
    """Fit the model on every data set; fits are independent and may run in a process pool."""
    if jobs == 1 or len(datasets) < 2:
        return [fit_lmm(model, d) for d in datasets]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fit_lmm, [model] * len(datasets), datasets))
