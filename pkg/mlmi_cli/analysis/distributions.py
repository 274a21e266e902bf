"""Tail probabilities for t and F reference distributions, infinite df included."""
import math

from scipy import special


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for T ~ t(df); the normal limit when df is infinite."""
    if math.isnan(t):
        return math.nan
    if math.isinf(df):
        return float(2.0 * special.ndtr(-abs(t)))
    return float(2.0 * special.stdtr(df, -abs(t)))


def f_upper_p(f: float, df1: float, df2: float) -> float:
    """P(F' >= f) for F' ~ F(df1, df2); df1 * F' ~ chi2(df1) when df2 is infinite."""
    if math.isnan(f):
        return math.nan
    if f <= 0.0:
        return 1.0
    if math.isinf(df2):
        return float(special.chdtrc(df1, df1 * f))
    return float(special.fdtrc(df1, df2, f))


def t_quantile(prob: float, df: float) -> float:
    if math.isinf(df):
        return float(special.ndtri(prob))
    return float(special.stdtrit(df, prob))
