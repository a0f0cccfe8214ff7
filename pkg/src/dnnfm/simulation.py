"""Monte Carlo designs with known covariance structure, and the study driver.

Every replication draws from ``np.random.default_rng([seed, rep])`` so a
``(seed, rep)`` pair fixes the coefficients, the factors and the errors.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .factor_model import build_bundle, fit_model, predict
from .metrics import cov_error_max, eig_extremes, function_error, spectral_norm
from .trainer import TrainConfig, derive_seed

log = logging.getLogger(__name__)

MA_SD = 0.5  # coefficients of the error process are N(0, 0.25)
METHODS = ("dnn", "sdnn", "linear")
METRICS = ("function_error", "cov_error", "precision_error")
DIAGNOSTIC_COLUMNS = ("d", "J", "signal", "noise", "snr", "eigmin_f", "eigmax_f", "eigmin_u", "eigmax_u")
STUDY_COLUMNS = ("design", "n", "J", "d", "method", *METRICS, "reps_ok")


@dataclass(frozen=True)
class DesignConfig:
    design: int
    n: int
    J: int
    d: int
    reps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.design not in (1, 2, 3):
            raise ValueError(f"design must be 1, 2 or 3, got {self.design}")
        if min(self.n, self.J, self.d, self.reps) < 1:
            raise ValueError("n, J, d and reps must be positive")
        if self.design == 3 and self.J < 2:
            raise ValueError("design 3 needs J >= 2")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass
class SimulatedPanel:
    Y: np.ndarray
    X: np.ndarray
    f0: np.ndarray
    U: np.ndarray
    sigma_f_true: np.ndarray
    sigma_u_true: np.ndarray
    sigma_y_true: np.ndarray
    precision_y_true: np.ndarray
    coefficients: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DiagnosticsRow:
    signal: float
    noise: float
    snr: float
    eigmin_f: float
    eigmax_f: float
    eigmin_u: float
    eigmax_u: float


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng([seed, rep])


def ma_loadings(a, b, c) -> np.ndarray:
    """Lower-triangular band matrix ``A`` with ``u = A e``.

    Row ``j`` (0-based) carries ``a[j-1]``, ``b[j-2]`` and ``c[j-3]`` on its
    first three sub-diagonals.
    """
    J = len(a)
    A = np.eye(J)
    for j in range(1, J):
        A[j, j - 1] = a[j - 1]
        if j >= 2:
            A[j, j - 2] = b[j - 2]
        if j >= 3:
            A[j, j - 3] = c[j - 3]
    return A


def simulate_errors(J: int, n: int, seed, ma_sd: float = MA_SD):
    """Banded moving-average errors and their exact covariance.

    ``seed`` may be an integer or a ``Generator``.  The band coefficients are
    drawn first, then the ``n x J`` standard normal innovations.
    """
    if J < 1:
        raise ValueError("J must be positive")
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(0.0, ma_sd, size=(3, J)) if ma_sd > 0 else np.zeros((3, J))
    A = ma_loadings(a, b, c)
    e = rng.standard_normal((n, J))
    return e @ A.T, A @ A.T


def psi_pairs(d: int) -> list[list[tuple[int, int]]]:
    """Interaction partners of each component of :func:`psi_transform`.

    Component ``m`` pairs ``x_m`` with the next ``ceil((d-1)/2)`` coordinates
    (cyclically).  For odd ``d`` every unordered pair appears exactly once.
    """
    if d < 2:
        return [[] for _ in range(d)]
    k = math.ceil((d - 1) / 2)
    return [[(m, (m + s) % d) for s in range(1, k + 1)] for m in range(d)]


def psi_transform(x) -> np.ndarray:
    """Squares plus pairwise interactions, one output per input coordinate.

    Works on a single vector or on rows of a matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    out = x**2
    for m, pairs in enumerate(psi_pairs(d)):
        for a, b in pairs:
            out[..., m] = out[..., m] + x[..., a] * x[..., b]
    return out


def psi_covariance(d: int) -> np.ndarray:
    """Exact ``Cov(psi(X))`` for ``X ~ N(0, I_d)``.

    ``Var(x^2) = 2``; two interaction terms covary (with variance 1) only when
    they are the same unordered pair; squares and interactions are uncorrelated.
    """
    C = 2.0 * np.eye(d)
    keys = [[frozenset(p) for p in pairs] for pairs in psi_pairs(d)]
    for m in range(d):
        for l in range(d):
            C[m, l] += sum(1 for p in keys[m] for q in keys[l] if p == q)
    return C


def _panel(f0, U, sigma_f, sigma_u, X, coefficients) -> SimulatedPanel:
    sigma_f = 0.5 * (sigma_f + sigma_f.T)
    sigma_u = 0.5 * (sigma_u + sigma_u.T)
    sigma_y = sigma_f + sigma_u
    prec = np.linalg.inv(sigma_y)
    return SimulatedPanel(
        Y=f0 + U, X=X, f0=f0, U=U,
        sigma_f_true=sigma_f, sigma_u_true=sigma_u, sigma_y_true=sigma_y,
        precision_y_true=0.5 * (prec + prec.T),
        coefficients=coefficients,
    )


def design1_terms(X) -> np.ndarray:
    """Columns ``x_m^2`` for odd (1-based) ``m`` and ``x_m`` for even ``m``."""
    X = np.asarray(X, dtype=np.float64)
    G = X.copy()
    G[:, 0::2] = X[:, 0::2] ** 2
    return G


def simulate_design1(cfg: DesignConfig, rep: int = 0, ma_sd: float = MA_SD) -> SimulatedPanel:
    rng = rep_rng(cfg.seed, rep)
    beta = rng.standard_normal((cfg.d, cfg.J))
    X = rng.standard_normal((cfg.n, cfg.d))
    U, sigma_u = simulate_errors(cfg.J, cfg.n, rng, ma_sd)
    f0 = design1_terms(X) @ beta
    var = np.where(np.arange(cfg.d) % 2 == 0, 2.0, 1.0)
    sigma_f = beta.T @ (var[:, None] * beta)
    return _panel(f0, U, sigma_f, sigma_u, X, {"beta": beta})


def _design2_truth(alpha, beta):
    # Cov(X, psi(X)) = 0: every entry is an odd Gaussian moment
    return alpha.T @ alpha + beta.T @ psi_covariance(alpha.shape[0]) @ beta


def simulate_design2(cfg: DesignConfig, rep: int = 0, ma_sd: float = MA_SD) -> SimulatedPanel:
    rng = rep_rng(cfg.seed, rep)
    alpha = rng.uniform(-1.0, 1.0, size=(cfg.d, cfg.J))
    beta = rng.uniform(-0.5, 0.5, size=(cfg.d, cfg.J))
    X = rng.standard_normal((cfg.n, cfg.d))
    U, sigma_u = simulate_errors(cfg.J, cfg.n, rng, ma_sd)
    f0 = X @ alpha + psi_transform(X) @ beta
    return _panel(f0, U, _design2_truth(alpha, beta), sigma_u, X, {"alpha": alpha, "beta": beta})


def sparsity_cardinality(J: int, m: int) -> int:
    """Nonzeros in row ``m`` (1-based) of the weak-factor coefficient matrices."""
    if J < 2 or m < 1:
        raise ValueError("need J >= 2 and m >= 1")
    if m == 1:
        power = 0.5
    elif m <= 3:
        power = 0.4
    elif m <= 5:
        power = 0.3
    else:
        power = 0.2
    # guard against 100 ** 0.5 evaluating to 9.999...
    return int(math.floor(J**power + 1e-12))


def _sparse_rows(rng, d, J, low, high):
    M = np.zeros((d, J))
    for m in range(d):
        k = sparsity_cardinality(J, m + 1)
        pos = rng.choice(J, size=k, replace=False)
        M[m, pos] = rng.uniform(low, high, size=k)
    return M


def simulate_design3(cfg: DesignConfig, rep: int = 0, ma_sd: float = MA_SD) -> SimulatedPanel:
    rng = rep_rng(cfg.seed, rep)
    alpha = _sparse_rows(rng, cfg.d, cfg.J, -1.0, 1.0)
    beta = _sparse_rows(rng, cfg.d, cfg.J, -0.5, 0.5)
    X = rng.standard_normal((cfg.n, cfg.d))
    U, sigma_u = simulate_errors(cfg.J, cfg.n, rng, ma_sd)
    f0 = X @ alpha + psi_transform(X) @ beta
    return _panel(f0, U, _design2_truth(alpha, beta), sigma_u, X, {"alpha": alpha, "beta": beta})


SIMULATORS = {1: simulate_design1, 2: simulate_design2, 3: simulate_design3}


def simulate(cfg: DesignConfig, rep: int = 0, ma_sd: float = MA_SD) -> SimulatedPanel:
    return SIMULATORS[cfg.design](cfg, rep, ma_sd)


def mc_sigma_f(cfg: DesignConfig, coefficients: dict, draws: int = 100_000, seed: int = 12345) -> np.ndarray:
    """Sample covariance of the true common component over fresh factor draws."""
    X = np.random.default_rng(seed).standard_normal((draws, cfg.d))
    if cfg.design == 1:
        F = design1_terms(X) @ coefficients["beta"]
    else:
        F = X @ coefficients["alpha"] + psi_transform(X) @ coefficients["beta"]
    return np.cov(F, rowvar=False, bias=True).reshape(cfg.J, cfg.J)


def snr_diagnostics(sigma_f, sigma_u) -> DiagnosticsRow:
    """Signal, noise and their ratio along the equal-weight direction, plus eigenvalue extremes."""
    sigma_f = np.asarray(sigma_f, dtype=np.float64)
    sigma_u = np.asarray(sigma_u, dtype=np.float64)
    J = sigma_f.shape[0]
    tau = np.full(J, 1.0 / math.sqrt(J))
    signal = float(tau @ sigma_f @ tau)
    noise = float(tau @ sigma_u @ tau)
    snr = signal / noise if noise > 0 else math.nan
    fmin, fmax = eig_extremes(sigma_f)
    umin, umax = eig_extremes(sigma_u)
    return DiagnosticsRow(signal, noise, snr, fmin, fmax, umin, umax)


def diagnostics_table(cfg: DesignConfig) -> pd.DataFrame:
    """Per-replication diagnostics of the true covariances (one row per rep)."""
    rows = []
    for rep in range(cfg.reps):
        panel = simulate(cfg, rep)
        rows.append(asdict(snr_diagnostics(panel.sigma_f_true, panel.sigma_u_true)))
    return pd.DataFrame(rows)


def diagnostics_summary(cfg: DesignConfig) -> dict:
    """Averages across replications, keyed like the diagnostics CSV columns."""
    means = diagnostics_table(cfg).mean(numeric_only=True)
    return {"d": cfg.d, "J": cfg.J, **{k: float(means[k]) for k in DIAGNOSTIC_COLUMNS[2:]}}


def method_config(method: str, seed: int, overrides: dict | None = None) -> TrainConfig | None:
    if method == "linear":
        return None
    mode = "dense" if method == "dnn" else "sparse"
    return TrainConfig.for_mode(mode, seed=seed, **(overrides or {}))


def evaluate_methods(panel: SimulatedPanel, methods: Sequence[str], seed: int,
                     metrics: Sequence[str] = METRICS, train_overrides: dict | None = None) -> dict:
    """Fit each method on one panel and score it against the truth."""
    out = {}
    for method in methods:
        try:
            model = fit_model(panel.Y, panel.X, method, method_config(method, seed, train_overrides))
            bundle = build_bundle(model, panel.Y, panel.X)
            scores = {}
            if "function_error" in metrics:
                scores["function_error"] = function_error(predict(model, panel.X), panel.f0)
            if "cov_error" in metrics:
                scores["cov_error"] = cov_error_max(bundle.sigma_y, panel.sigma_y_true)
            if "precision_error" in metrics:
                scores["precision_error"] = spectral_norm(bundle.precision_y - panel.precision_y_true)
            out[method] = scores
        except Exception as exc:  # recorded and excluded from the averages
            log.warning("method %s failed: %s", method, exc)
            out[method] = None
    return out


def _study_task(args):
    cfg, rep, methods, metrics, overrides = args
    panel = simulate(cfg, rep)
    return cfg, rep, evaluate_methods(panel, methods, derive_seed(cfg.seed, rep), metrics, overrides)


def run_study(grid: Iterable[DesignConfig], methods: Sequence[str] = METHODS,
              metrics: Sequence[str] = METRICS, train_overrides: dict | None = None,
              threads: int = 1) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Simulate, fit and score every (cell, replication, method).

    Returns the averaged study table (one row per cell and method, columns
    ``STUDY_COLUMNS``) and the per-replication records it was built from.
    """
    grid = list(grid)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    tasks = [(cfg, rep, tuple(methods), tuple(metrics), train_overrides)
             for cfg in grid for rep in range(cfg.reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_study_task, tasks))
    else:
        results = [_study_task(t) for t in tasks]

    records = []
    for cfg, rep, scores in results:
        for method in methods:
            s = scores[method]
            rec = {"design": cfg.design, "n": cfg.n, "J": cfg.J, "d": cfg.d, "rep": rep,
                   "method": method, "ok": s is not None}
            rec.update({m: (s[m] if s is not None else math.nan) for m in metrics})
            records.append(rec)
    records = pd.DataFrame(records)

    rows = []
    for cfg in grid:
        for method in methods:
            sel = records[(records.design == cfg.design) & (records.n == cfg.n) & (records.J == cfg.J)
                          & (records.d == cfg.d) & (records.method == method)]
            ok = sel[sel.ok]
            row = {"design": cfg.design, "n": cfg.n, "J": cfg.J, "d": cfg.d, "method": method}
            for m in METRICS:
                row[m] = float(ok[m].mean()) if m in metrics and len(ok) else math.nan
            row["reps_ok"] = int(len(ok))
            rows.append(row)
    return pd.DataFrame(rows, columns=list(STUDY_COLUMNS)), records


def with_reps(cfg: DesignConfig, reps: int) -> DesignConfig:
    return replace(cfg, reps=reps)
