"""Error metrics for function, covariance and precision estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYM_TOL = 1e-10


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class ErrorReport:
    function_error: float
    cov_error: float
    precision_error: float


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _check_symmetric(S, tol=SYM_TOL) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if S.size and np.max(np.abs(S - S.T)) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return S


def function_error(f_hat, f0) -> float:
    """Largest per-asset mean squared deviation between fitted and true functions."""
    f_hat, f0 = _same_shape(f_hat, f0)
    return float(np.max(np.mean((f_hat - f0) ** 2, axis=0)))


def cov_error_max(A, B) -> float:
    """Entrywise max-norm distance."""
    A, B = _same_shape(A, B)
    return float(np.max(np.abs(A - B)))


def spectral_norm(S, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest absolute eigenvalue of a symmetric matrix by power iteration on ``S @ S``.

    Iterating on the square avoids the sign oscillation plain power iteration
    shows when ``S`` has eigenvalues ``+lam`` and ``-lam``.  The start vector
    is the normalised ones vector plus a small seeded perturbation.
    """
    S = _check_symmetric(S)
    J = S.shape[0]
    if J == 0 or not np.any(S):
        return 0.0
    # unit max-entry scaling keeps S @ S clear of underflow and overflow
    scale = float(np.max(np.abs(S)))
    return scale * _power_iteration(S / scale, tol, max_iter, seed)


def _power_iteration(S, tol, max_iter, seed) -> float:
    J = S.shape[0]
    rng = np.random.default_rng(seed)
    x = np.ones(J) / np.sqrt(J) + 1e-3 * rng.standard_normal(J)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = S @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector landed in the null space
            x = rng.standard_normal(J)
            x /= np.linalg.norm(x)
            continue
        z = S @ y
        nz = np.linalg.norm(z)
        new = float(np.sqrt(nz))  # ||S^2 x||^(1/2) with ||x|| = 1
        x = z / nz
        if abs(new - est) <= tol * new:
            return float(np.linalg.norm(S @ x))
        est = new
    return float(np.linalg.norm(S @ x))


def eig_extremes(S) -> tuple[float, float]:
    """Smallest and largest eigenvalues of a symmetric matrix (LAPACK ``syevd``)."""
    S = _check_symmetric(S)
    try:
        w = np.linalg.eigvalsh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigensolver failed to converge for a {S.shape} matrix") from exc
    return float(w[0]), float(w[-1])


def error_report(f_hat, f0, sigma_y_hat, sigma_y, precision_hat, precision) -> ErrorReport:
    return ErrorReport(
        function_error=function_error(f_hat, f0),
        cov_error=cov_error_max(sigma_y_hat, sigma_y),
        precision_error=spectral_norm(np.asarray(precision_hat) - np.asarray(precision)),
    )
