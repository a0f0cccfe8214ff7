"""Nonlinear factor models and the covariance / precision bundle built on them.

Returns are modelled as ``Y_j = f_j(X) + u_j``.  The common component is
estimated per asset (ReLU networks, sparse ReLU networks or OLS), the
residual covariance is hard-thresholded entry by entry against a data-driven
level, and the precision of the returns is formed without ever inverting the
covariance of the fitted factor component, which may be singular.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import NetworkParams, forward
from .trainer import FitResult, TrainConfig, derive_seed, fit_many

log = logging.getLogger(__name__)

MODES = ("dnn", "sdnn", "linear")
OMEGA_CONSTANT = 3.0
EIG_FLOOR_REL = 1e-6
EIG_FLOOR_ABS = 1e-12
COND_LIMIT = 1e14


class DataError(ValueError):
    pass


class EstimationError(RuntimeError):
    pass


@dataclass
class LinearModel:
    """OLS fit ``y = intercept + X @ slopes``; ``coef = (intercept, *slopes)``."""

    coef: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.coef[0] + X @ self.coef[1:]

    def to_dict(self) -> dict:
        return {"kind": "linear", "coef": self.coef.tolist()}


@dataclass
class FittedFactorModel:
    mode: str
    models: list
    asset_ids: list[str]
    factor_dim: int
    fitted_values: np.ndarray | None = None
    fit_results: list[FitResult] = field(default_factory=list)

    def __post_init__(self):
        if len(self.models) != len(self.asset_ids):
            raise ValueError("one model per asset id required")

    @property
    def J(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class CovarianceBundle:
    sigma_f: np.ndarray
    sigma_u_raw: np.ndarray
    theta: np.ndarray
    sigma_u_th: np.ndarray
    sigma_y: np.ndarray
    precision_u: np.ndarray
    precision_y: np.ndarray
    omega_n: float
    n: int
    eig_floor: float
    eig_shift: float  # amount added to the diagonal before inversion (0 if none)

    @property
    def J(self) -> int:
        return self.sigma_y.shape[0]

    @property
    def eig_floor_applied(self) -> bool:
        return self.eig_shift > 0

    @property
    def s_n(self) -> int:
        return sparsity_level(self.sigma_u_th)


def _as_panel(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DataError(f"{name} must be a 2-D panel")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains missing or non-finite values")
    return a


def fit_model(returns, factors, mode: str, train_cfg: TrainConfig | None = None,
              asset_ids: Sequence[str] | None = None) -> FittedFactorModel:
    """Fit one predictor per asset on the shared factor panel.

    In ``dnn`` and ``sdnn`` modes asset ``j`` trains with seed
    ``derive_seed(train_cfg.seed, j)``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    Y = _as_panel(returns, "returns")
    X = _as_panel(factors, "factors")
    n, J = Y.shape
    if X.shape[0] != n:
        raise DataError(f"returns have {n} rows but factors have {X.shape[0]}")
    if n < 20:
        raise DataError(f"need at least 20 observations, got {n}")
    ids = list(asset_ids) if asset_ids is not None else [str(j) for j in range(J)]
    d = X.shape[1]

    if mode == "linear":
        design = np.column_stack([np.ones(n), X])
        coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
        models = [LinearModel(coef[:, j].copy()) for j in range(J)]
        return FittedFactorModel(mode, models, ids, d, design @ coef)

    want = "dense" if mode == "dnn" else "sparse"
    cfg = train_cfg if train_cfg is not None else TrainConfig.for_mode(want)
    if cfg.mode != want:
        raise ValueError(f"{mode} needs a {want}-mode TrainConfig, got {cfg.mode}")
    seeds = [derive_seed(cfg.seed, j) for j in range(J)]
    results = fit_many(X, Y, cfg.network_spec(d), cfg, seeds)
    models = [r.params for r in results]
    fitted = np.column_stack([forward(p, X) for p in models])
    return FittedFactorModel(mode, models, ids, d, fitted, results)


def predict(model: FittedFactorModel, factors) -> np.ndarray:
    X = _as_panel(factors, "factors")
    if X.shape[1] != model.factor_dim:
        raise ValueError(f"model expects {model.factor_dim} factors, got {X.shape[1]}")
    cols = []
    for m in model.models:
        cols.append(forward(m, X) if isinstance(m, NetworkParams) else m.predict(X))
    return np.column_stack(cols) if cols else np.empty((X.shape[0], 0))


def residuals(model: FittedFactorModel, returns, factors) -> np.ndarray:
    Y = _as_panel(returns, "returns")
    f = predict(model, factors)
    if Y.shape != f.shape:
        raise ValueError(f"returns {Y.shape} do not match predictions {f.shape}")
    return Y - f


def estimate_sigma_f(fitted) -> np.ndarray:
    """Covariance of the fitted common component, demeaned, divisor ``n``."""
    F = np.asarray(fitted, dtype=np.float64)
    n = F.shape[0]
    if n < 2:
        raise ValueError("need at least two observations")
    C = F - F.mean(axis=0)
    S = C.T @ C / n
    return 0.5 * (S + S.T)


def raw_residual_cov(u_hat) -> np.ndarray:
    """``U' U / n`` without demeaning."""
    U = np.asarray(u_hat, dtype=np.float64)
    S = U.T @ U / U.shape[0]
    return 0.5 * (S + S.T)


def compute_theta(u_hat, sigma_u_raw) -> np.ndarray:
    """Mean absolute deviation of the residual cross-products from their average."""
    U = np.asarray(u_hat, dtype=np.float64)
    S = np.asarray(sigma_u_raw, dtype=np.float64)
    J = U.shape[1]
    theta = np.empty((J, J))
    for j in range(J):
        theta[j] = np.mean(np.abs(U[:, j:j + 1] * U - S[j]), axis=0)
    return 0.5 * (theta + theta.T)


def omega_n(n: int, J: int, constant: float = OMEGA_CONSTANT) -> float:
    """Threshold rate ``constant * sqrt(log J / n)``."""
    if n < 1 or J < 1:
        raise ValueError("n and J must be positive")
    return constant * math.sqrt(math.log(J) / n)


def adaptive_threshold(sigma_u_raw, theta, omega: float) -> np.ndarray:
    """Keep an off-diagonal entry iff ``|sigma_jk| >= theta_jk * omega``; keep the diagonal."""
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    S = np.asarray(sigma_u_raw, dtype=np.float64)
    T = np.asarray(theta, dtype=np.float64)
    keep = np.abs(S) >= T * omega
    np.fill_diagonal(keep, True)
    keep = keep & keep.T
    return np.where(keep, S, 0.0)


def sparsity_level(S) -> int:
    """Largest number of nonzero entries in any row."""
    S = np.asarray(S)
    return int(np.max(np.count_nonzero(S, axis=1))) if S.size else 0


def default_eig_floor(sigma_u_th) -> float:
    mean_diag = float(np.mean(np.diag(sigma_u_th)))
    return max(EIG_FLOOR_REL * mean_diag, EIG_FLOOR_ABS)


def precision_from_parts(sigma_u_th, sigma_f, eig_floor: float | None = None,
                         return_shift: bool = False):
    """Precision of ``sigma_u_th + sigma_f`` via ``(A+B)^-1 = A^-1 - A^-1 B (I + A^-1 B)^-1 A^-1``.

    Parameters
    ----------
    sigma_u_th : (J, J) array
        Thresholded residual covariance.  If its smallest eigenvalue is below
        ``eig_floor`` the diagonal is lifted so that it equals ``eig_floor``.
    sigma_f : (J, J) array
        Covariance of the common component; may be singular and is never
        inverted.
    eig_floor : float, optional
        Defaults to ``1e-6`` times the mean diagonal of ``sigma_u_th``.

    Returns
    -------
    precision_u, precision_y : (J, J) arrays
        Plus the diagonal shift that was applied when ``return_shift`` is set.
    """
    A = np.asarray(sigma_u_th, dtype=np.float64)
    B = np.asarray(sigma_f, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"incompatible shapes {A.shape} and {B.shape}")
    J = A.shape[0]
    floor = default_eig_floor(A) if eig_floor is None else float(eig_floor)
    if floor <= 0:
        raise ValueError("eig_floor must be positive")

    lam, V = np.linalg.eigh(0.5 * (A + A.T))
    shift = 0.0
    if lam[0] < floor:
        shift = floor - lam[0]
        log.info("residual covariance floored: min eigenvalue %.3e lifted by %.3e", lam[0], shift)
        lam = lam + shift
    Pu = (V / lam) @ V.T
    Pu = 0.5 * (Pu + Pu.T)

    PuB = Pu @ B
    M = np.eye(J) + PuB
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise EstimationError(f"I + precision_u @ sigma_f is numerically singular (cond={cond:.3e})")
    Py = Pu - PuB @ np.linalg.solve(M, Pu)
    Py = 0.5 * (Py + Py.T)
    if return_shift:
        return Pu, Py, shift
    return Pu, Py


def build_bundle(model: FittedFactorModel, returns, factors, *, omega_constant: float = OMEGA_CONSTANT,
                 eig_floor: float | None = None) -> CovarianceBundle:
    Y = _as_panel(returns, "returns")
    fitted = predict(model, factors)
    u_hat = Y - fitted
    n, J = u_hat.shape
    sigma_f = estimate_sigma_f(fitted)
    sigma_u_raw = raw_residual_cov(u_hat)
    theta = compute_theta(u_hat, sigma_u_raw)
    omega = omega_n(n, J, omega_constant)
    sigma_u_th = adaptive_threshold(sigma_u_raw, theta, omega)
    floor = default_eig_floor(sigma_u_th) if eig_floor is None else eig_floor
    Pu, Py, shift = precision_from_parts(sigma_u_th, sigma_f, floor, return_shift=True)
    return CovarianceBundle(
        sigma_f=sigma_f,
        sigma_u_raw=sigma_u_raw,
        theta=theta,
        sigma_u_th=sigma_u_th,
        sigma_y=sigma_f + sigma_u_th,
        precision_u=Pu,
        precision_y=Py,
        omega_n=omega,
        n=n,
        eig_floor=floor,
        eig_shift=shift,
    )
