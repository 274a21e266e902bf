"""
Combining analyses of m imputed data sets.

- pool_estimates: Rubin's rules per fixed effect, plain means for variance components
- pool_constraints: D1, Wald test of delta-method constraints
- pool_chisq_d2 / pool_compare_d2: D2, combination of chi-square statistics
- pool_lrt_d3: D3, pooled likelihood-ratio test
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from mlmi_cli.analysis.constraints import Constraint, delta_method, gradient, parse_constraint
from mlmi_cli.analysis.distributions import f_upper_p, t_quantile, t_two_sided_p
from mlmi_cli.analysis.lmm_fit import AnalysisModel, LmmFit, loglik_at
from mlmi_cli.exceptions import NumericalError, ValidationError
from mlmi_cli.imputation.data_model import Dataset
from mlmi_cli.utils.common import json_number
from mlmi_cli.utils.logger import get_logger

logger = get_logger(__name__)

FMI_SPREAD = 0.2
CI_LEVEL = 0.95
INF = math.inf


@dataclass(frozen=True)
class PooledParameter:
    name: str
    estimate: float
    se: float
    t: float
    df: float
    p: float
    riv: float
    fmi: float
    ci_lower: float = math.nan
    ci_upper: float = math.nan

    def to_dict(self) -> Dict:
        return {k: (v if k == "name" else json_number(v)) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class PooledEstimates:
    parameters: Tuple[PooledParameter, ...]
    components: Dict[str, float]
    m: int
    df_com: Optional[float] = None

    @property
    def adjusted(self) -> bool:
        return self.df_com is not None

    def parameter(self, name: str) -> PooledParameter:
        for row in self.parameters:
            if row.name == name:
                return row
        raise ValidationError(f"No pooled parameter named '{name}'")

    def to_dict(self) -> Dict:
        return {
            "m": self.m,
            "df_com": json_number(self.df_com),
            "adjusted": self.adjusted,
            "estimates": [p.to_dict() for p in self.parameters],
            "components": {k: json_number(v) for k, v in self.components.items()},
        }


@dataclass(frozen=True)
class DTestResult:
    procedure: str
    F: float
    df1: float
    df2: float
    p: float
    r: float
    m: int
    hypothesis: Tuple[str, ...] = ()
    estimates: Tuple[PooledParameter, ...] = ()
    notes: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict:
        return {
            "procedure": self.procedure,
            "F": json_number(self.F),
            "df1": json_number(self.df1),
            "df2": json_number(self.df2),
            "p": json_number(self.p),
            "r": json_number(self.r),
            "m": self.m,
            "hypothesis": list(self.hypothesis),
            "estimates": [e.to_dict() for e in self.estimates],
            "notes": list(self.notes),
        }


# --- Rubin's rules ---


def rubin_df(m: int, B: float, U: float) -> float:
    """(m - 1)(1 + 1/r)^2, infinite when B = 0."""
    if B <= 0.0:
        return INF
    if U <= 0.0:
        return float(m - 1)
    r = (1.0 + 1.0 / m) * B / U
    return (m - 1) * (1.0 + 1.0 / r) ** 2


def barnard_rubin_df(m: int, B: float, U: float, df_com: float) -> float:
    """Small-sample df: harmonic combination of Rubin's df and the observed-data df."""
    if not df_com > 0:
        raise ValidationError(f"Complete-data df must be positive, got {df_com}")
    T = U + (1.0 + 1.0 / m) * B
    gamma = (1.0 + 1.0 / m) * B / T if T > 0 else 0.0
    nu = rubin_df(m, B, U)
    if math.isinf(df_com):
        return nu
    nu_obs = (df_com + 1.0) / (df_com + 3.0) * df_com * (1.0 - gamma)
    if nu_obs <= 0.0:
        return 0.0
    if math.isinf(nu):
        return nu_obs
    return 1.0 / (1.0 / nu + 1.0 / nu_obs)


def _between_variance(values: np.ndarray) -> Tuple[float, float]:
    """(mean, sample variance); exact mean and zero variance for identical values."""
    if np.ptp(values) == 0.0:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.var(ddof=1))


def rubin_scalar(name: str, estimates, variances, df_com: float = None) -> PooledParameter:
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.shape[0]
    if m < 2:
        raise ValidationError("Pooling needs at least two imputed data sets")
    q_bar, B = _between_variance(q)
    U = float(u.mean())
    T = U + (1.0 + 1.0 / m) * B
    r = (1.0 + 1.0 / m) * B / U if U > 0 else (INF if B > 0 else 0.0)
    df = rubin_df(m, B, U) if df_com is None else barnard_rubin_df(m, B, U, df_com)
    if math.isinf(r):
        fmi = 1.0
    else:
        fmi = (r + 2.0 / (df + 3.0)) / (r + 1.0) if B > 0 else 0.0
    se = math.sqrt(T)
    t = q_bar / se if se > 0 else (0.0 if q_bar == 0 else math.copysign(INF, q_bar))
    half = t_quantile(0.5 + CI_LEVEL / 2.0, df) * se if df > 0 else INF
    return PooledParameter(
        name=name,
        estimate=q_bar,
        se=se,
        t=t,
        df=df,
        p=t_two_sided_p(t, df),
        riv=r,
        fmi=min(max(fmi, 0.0), 1.0),
        ci_lower=q_bar - half,
        ci_upper=q_bar + half,
    )


def _resolve_df_com(fits: Sequence[LmmFit], df_com: Union[None, str, float]) -> Optional[float]:
    if df_com is None:
        return None
    if isinstance(df_com, str):
        if df_com.lower() != "auto":
            try:
                return float(df_com)
            except ValueError:
                raise ValidationError(f"df_com must be a number or 'auto', got '{df_com}'") from None
        return float(min(f.df_com for f in fits))
    return float(df_com)


def _check_fits(fits: Sequence[LmmFit]) -> None:
    if len(fits) < 2:
        raise ValidationError(f"Pooling needs at least two fits, got {len(fits)}")
    names = fits[0].fixed_names
    components = tuple(fits[0].components())
    for index, fit in enumerate(fits[1:], start=2):
        if fit.fixed_names != names or tuple(fit.components()) != components:
            raise ValidationError(f"Fit {index} has a different parameter set than fit 1")


def pool_estimates(fits: Sequence[LmmFit], df_com: Union[None, str, float] = None) -> PooledEstimates:
    """Rubin's rules per fixed effect; optional Barnard-Rubin df with df_com ('auto' = N - p)."""
    _check_fits(fits)
    df_com = _resolve_df_com(fits, df_com)
    Q = np.array([f.beta for f in fits])
    U = np.array([np.diag(f.vcov) for f in fits])
    parameters = tuple(rubin_scalar(name, Q[:, i], U[:, i], df_com) for i, name in enumerate(fits[0].fixed_names))

    components = {}
    for name in fits[0].components():
        components[name] = float(np.mean([f.components()[name] for f in fits]))
    return PooledEstimates(parameters=parameters, components=components, m=len(fits), df_com=df_com)


# --- Multiparameter tests ---


def li_df2(k: int, m: int, r: float) -> float:
    """Denominator df shared by D1 and D3."""
    if r <= 0.0:
        return INF
    a = k * (m - 1)
    if a > 4:
        return 4.0 + (a - 4.0) * (1.0 + (1.0 - 2.0 / a) / r) ** 2
    return a * (1.0 + 1.0 / k) * (1.0 + 1.0 / r) ** 2 / 2.0


def _fmi_spread_note(fmis: Sequence[float]) -> Tuple[str, ...]:
    if len(fmis) < 2:
        return ()
    spread = max(fmis) - min(fmis)
    if spread <= FMI_SPREAD:
        return ()
    note = f"FMI differs by {spread:.3f} across the tested parameters; the test assumes roughly equal FMIs"
    logger.warning(note)
    return (note,)


def pool_constraints(fits: Sequence[LmmFit], constraints: Sequence[Union[str, Constraint]]) -> DTestResult:
    """D1 for H0: g(theta) = 0, with g's covariance from the delta method in every data set."""
    _check_fits(fits)
    if not constraints:
        raise ValidationError("At least one constraint is required")
    constraints = [parse_constraint(c) if isinstance(c, str) else c for c in constraints]
    names = fits[0].fixed_names
    for c in constraints:
        c.bind(names)
    m, k = len(fits), len(constraints)

    Q = np.zeros((m, k))
    U = np.zeros((m, k, k))
    for l, fit in enumerate(fits):
        grads = []
        for i, c in enumerate(constraints):
            Q[l, i], _ = delta_method(fit.beta, fit.vcov, c, names)
            grads.append(gradient(c, names, fit.beta))
        D = np.array(grads)
        U[l] = D @ fit.vcov @ D.T

    q_bar = np.array([_between_variance(Q[:, i])[0] for i in range(k)])
    U_bar = U.mean(axis=0)
    B = np.cov(Q, rowvar=False, ddof=1).reshape(k, k) if np.ptp(Q, axis=0).any() else np.zeros((k, k))

    try:
        C = linalg.cho_factor(U_bar, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError("Within-imputation covariance of the constraints is singular") from e
    r1 = (1.0 + 1.0 / m) * float(np.trace(linalg.cho_solve(C, B))) / k
    F = float(q_bar @ linalg.cho_solve(C, q_bar)) / (k * (1.0 + r1))
    df2 = li_df2(k, m, r1)

    rows = tuple(rubin_scalar(str(c), Q[:, i], U[:, i, i]) for i, c in enumerate(constraints))
    return DTestResult(
        procedure="D1",
        F=F,
        df1=float(k),
        df2=df2,
        p=f_upper_p(F, k, df2),
        r=r1,
        m=m,
        hypothesis=tuple(f"{c} = 0" for c in constraints),
        estimates=rows,
        notes=_fmi_spread_note([row.fmi for row in rows]) if k >= 2 else (),
    )


def pool_chisq_d2(stats: Sequence[float], k: int) -> DTestResult:
    """D2 from m chi-square statistics on k df."""
    d = np.asarray(stats, dtype=float)
    m = d.shape[0]
    if m < 2:
        raise ValidationError("D2 needs at least two statistics")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if (d < 0).any() or np.isnan(d).any():
        raise ValidationError("Chi-square statistics must be non-negative")

    d_bar = float(d.mean())
    r2 = (1.0 + 1.0 / m) * _between_variance(np.sqrt(d))[1]
    F = (d_bar / k - (m + 1.0) / (m - 1.0) * r2) / (1.0 + r2)
    notes = ()
    if F < 0.0:
        note = f"D2 statistic was negative ({F:.4f}) and is reported as 0"
        logger.warning(note)
        notes, F = (note,), 0.0
    df2 = INF if r2 <= 0.0 else k ** (-3.0 / m) * (m - 1.0) * (1.0 + 1.0 / r2) ** 2
    return DTestResult(procedure="D2", F=F, df1=float(k), df2=df2, p=f_upper_p(F, k, df2), r=r2, m=m, notes=notes)


def _require_ml(fits: Sequence[LmmFit], label: str) -> None:
    if any(f.method != "ML" for f in fits):
        raise ValidationError(f"{label} models must be fit by ML; REML deviances are not comparable across fixed effects")


def _nesting_df(fits_full: Sequence[LmmFit], fits_null: Sequence[LmmFit], k: Optional[int]) -> int:
    if k is None:
        k = fits_full[0].n_params - fits_null[0].n_params
    if k <= 0:
        raise ValidationError(f"Models are not nested: the full model must have more parameters (k = {k})")
    return int(k)


def _average_parameters(fits: Sequence[LmmFit]):
    return (
        np.mean([f.beta for f in fits], axis=0),
        np.mean([f.re_cov for f in fits], axis=0),
        float(np.mean([f.sigma2 for f in fits])),
    )


def _dropped_fmi_note(fits_full: Sequence[LmmFit], fits_null: Sequence[LmmFit]) -> Tuple[str, ...]:
    dropped = [n for n in fits_full[0].fixed_names if n not in fits_null[0].fixed_names]
    if len(dropped) < 2:
        return ()
    pooled = pool_estimates(fits_full)
    return _fmi_spread_note([pooled.parameter(n).fmi for n in dropped])


def pool_lrt_d3(
    fits_full: Sequence[LmmFit],
    fits_null: Sequence[LmmFit],
    datasets: Sequence[Dataset],
    loglik_eval: Callable = loglik_at,
    k: int = None,
) -> DTestResult:
    """D3: likelihood ratios re-evaluated at the averaged estimates of both models."""
    m = len(fits_full)
    if m < 2:
        raise ValidationError("D3 needs at least two imputed data sets")
    if len(fits_null) != m or len(datasets) != m:
        raise ValidationError(f"Expected {m} null-model fits and {m} data sets, got {len(fits_null)} and {len(datasets)}")
    _require_ml(fits_full, "Full")
    _require_ml(fits_null, "Null")
    k = _nesting_df(fits_full, fits_null, k)

    full_model = AnalysisModel.from_text(fits_full[0].formula, "ML")
    null_model = AnalysisModel.from_text(fits_null[0].formula, "ML")

    d_bar = float(np.mean([2.0 * (f.loglik - n.loglik) for f, n in zip(fits_full, fits_null)]))
    full_avg = _average_parameters(fits_full)
    null_avg = _average_parameters(fits_null)
    d_tilde = float(np.mean([2.0 * (loglik_eval(full_model, d, *full_avg) - loglik_eval(null_model, d, *null_avg)) for d in datasets]))

    notes = []
    r3 = (m + 1.0) / (k * (m - 1.0)) * (d_bar - d_tilde)
    if r3 < 0.0:
        note = f"D3 variance ratio was negative ({r3:.4g}) and is set to 0"
        logger.warning(note)
        notes.append(note)
        r3 = 0.0
    F = d_tilde / (k * (1.0 + r3))
    if F < 0.0:
        note = f"D3 statistic was negative ({F:.4g}) and is reported as 0"
        logger.warning(note)
        notes.append(note)
        F = 0.0
    notes.extend(_dropped_fmi_note(fits_full, fits_null))
    df2 = li_df2(k, m, r3)
    return DTestResult(
        procedure="D3",
        F=F,
        df1=float(k),
        df2=df2,
        p=f_upper_p(F, k, df2),
        r=r3,
        m=m,
        hypothesis=(f"Model 1: {fits_full[0].formula}", f"Model 2: {fits_null[0].formula}"),
        notes=tuple(notes),
    )


def pool_compare_d2(fits_full: Sequence[LmmFit], fits_null: Sequence[LmmFit], k: int = None) -> DTestResult:
    """D2 applied to the per-imputation likelihood-ratio statistics."""
    if len(fits_full) != len(fits_null):
        raise ValidationError("Full and null model need the same number of fits")
    _require_ml(fits_full, "Full")
    _require_ml(fits_null, "Null")
    k = _nesting_df(fits_full, fits_null, k)
    stats: List[float] = []
    for f, n in zip(fits_full, fits_null):
        lr = 2.0 * (f.loglik - n.loglik)
        # tiny negatives are optimizer noise
        stats.append(max(lr, 0.0))
    result = pool_chisq_d2(stats, k)
    return DTestResult(
        procedure="D2",
        F=result.F,
        df1=result.df1,
        df2=result.df2,
        p=result.p,
        r=result.r,
        m=result.m,
        hypothesis=(f"Model 1: {fits_full[0].formula}", f"Model 2: {fits_null[0].formula}"),
        notes=result.notes,
    )
