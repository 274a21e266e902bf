"""
Random draws used by the Gibbs sampler.

vec() stacks columns (Fortran order) everywhere in this package:
vec(B)[col * nrow + row] == B[row, col].
"""
import numpy as np
from scipy import linalg

from mlmi_cli.exceptions import NumericalError


def vec(matrix: np.ndarray) -> np.ndarray:
    """Column-stacking; leading axes are batch axes."""
    matrix = np.asarray(matrix)
    return np.swapaxes(matrix, -1, -2).reshape(matrix.shape[:-2] + (-1,))


def unvec(vector: np.ndarray, nrow: int) -> np.ndarray:
    vector = np.asarray(vector)
    return np.swapaxes(vector.reshape(vector.shape[:-1] + (-1, nrow)), -1, -2)


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def cholesky_lower(matrix: np.ndarray, what: str = "matrix") -> np.ndarray:
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"Cholesky factorization failed: {what} is not positive definite") from e


def is_positive_definite(matrix: np.ndarray) -> bool:
    try:
        linalg.cholesky(matrix, lower=True)
        return True
    except linalg.LinAlgError:
        return False


def psd_factor(matrix: np.ndarray, what: str = "matrix", tol: float = 1e-10) -> np.ndarray:
    """A with A A' = matrix for positive semidefinite input (zero matrices allowed)."""
    matrix = symmetrize(np.atleast_2d(np.asarray(matrix, dtype=float)))
    eigval, eigvec = np.linalg.eigh(matrix)
    scale = max(1.0, float(np.max(np.abs(eigval)))) if eigval.size else 1.0
    if eigval.size and eigval.min() < -tol * scale:
        raise NumericalError(f"{what} is not positive semidefinite (smallest eigenvalue {eigval.min():.3g})")
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


def draw_mvn_precision(rng: np.random.Generator, mean: np.ndarray, chol_precision: np.ndarray) -> np.ndarray:
    """Draw from N(mean, P^-1) given the lower Cholesky factor L of P (P = L L'). Batches over leading axes."""
    z = rng.standard_normal(mean.shape)
    return mean + np.linalg.solve(np.swapaxes(chol_precision, -1, -2), z[..., None])[..., 0]


def draw_wishart(rng: np.random.Generator, df: float, scale: np.ndarray) -> np.ndarray:
    """
    Wishart(df, scale) by the Bartlett decomposition: W = (L A)(L A)' with
    L = chol(scale), A lower triangular, A_ii = sqrt(chi2(df - i)), A_ij ~ N(0, 1).
    """
    d = scale.shape[0]
    if df <= d - 1:
        raise NumericalError(f"Wishart degrees of freedom {df} must exceed dimension - 1 = {d - 1}")
    L = cholesky_lower(scale, "Wishart scale")
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    rows, cols = np.tril_indices(d, k=-1)
    A[rows, cols] = rng.standard_normal(rows.shape[0])
    LA = L @ A
    return symmetrize(LA @ LA.T)


def draw_inverse_wishart(rng: np.random.Generator, df: float, scale: np.ndarray, what: str = "covariance") -> np.ndarray:
    """
    Covariance C with C^-1 ~ Wishart(df, scale^-1), i.e. C ~ Inverse-Wishart(df, scale).
    Mean is scale / (df - d - 1).
    """
    scale = symmetrize(scale)
    R = cholesky_lower(scale, f"{what} scale")
    eye = np.eye(scale.shape[0])
    precision = draw_wishart(rng, df, symmetrize(linalg.cho_solve((R, True), eye)))
    L = cholesky_lower(precision, f"{what} precision draw")
    return symmetrize(linalg.cho_solve((L, True), eye))
