from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg
import structlog

from app.utils.errors import EigensolverError, NotPositiveDefiniteError

logger = structlog.get_logger(__name__)

Eigensolver = Literal["auto", "lapack", "jacobi"]

# auto mode: Jacobi below this size, LAPACK above
JACOBI_MAX_N = 32


@dataclass(frozen=True)
class JacobiSettings:
    tol: float = 1e-10
    max_sweeps: int = 100


def jacobi_eigh(matrix: np.ndarray, settings: JacobiSettings | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a real symmetric matrix.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors as
    columns. Converged when the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||A||_F)``.
    """
    settings = settings or JacobiSettings()
    a = np.array(matrix, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("jacobi_eigh expects a square matrix")
    n = a.shape[0]
    v = np.eye(n)
    threshold = settings.tol * max(1.0, float(np.linalg.norm(a)))

    for sweep in range(settings.max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = float((a[q, q] - a[p, p]) / (2.0 * apq))
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        raise EigensolverError(f"Jacobi did not converge within {settings.max_sweeps} sweeps")

    logger.debug("jacobi_converged", n=n, sweeps=sweep)
    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return values[order], v[:, order]


def symmetric_eigh(
    matrix: np.ndarray,
    solver: Eigensolver = "auto",
    count: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenpairs of a symmetric matrix; only the lowest ``count`` when given."""
    n = matrix.shape[0]
    use_jacobi = solver == "jacobi" or (solver == "auto" and n <= JACOBI_MAX_N)
    try:
        if use_jacobi:
            values, vectors = jacobi_eigh(matrix)
        elif count is not None and count < n:
            values, vectors = scipy.linalg.eigh(matrix, subset_by_index=[0, count - 1])
        else:
            values, vectors = scipy.linalg.eigh(matrix)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise EigensolverError(f"eigendecomposition failed: {e}") from e

    if count is not None:
        values, vectors = values[:count], vectors[:, :count]
    return values, vectors


def symmetric_eigvalsh(matrix: np.ndarray, solver: Eigensolver = "auto", count: int | None = None) -> np.ndarray:
    n = matrix.shape[0]
    if solver == "jacobi" or (solver == "auto" and n <= JACOBI_MAX_N):
        return symmetric_eigh(matrix, "jacobi", count)[0]
    try:
        if count is not None and count < n:
            return scipy.linalg.eigh(matrix, eigvals_only=True, subset_by_index=[0, count - 1])
        return scipy.linalg.eigh(matrix, eigvals_only=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise EigensolverError(f"eigendecomposition failed: {e}") from e


def cholesky_logdet(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor and log-determinant of a positive-definite matrix."""
    try:
        factor = scipy.linalg.cholesky(matrix, lower=True)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError("matrix is not positive definite") from e
    return factor, 2.0 * float(np.sum(np.log(np.diag(factor))))
