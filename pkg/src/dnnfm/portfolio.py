"""Rolling-window global minimum variance backtests with transaction costs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .factor_model import build_bundle, default_eig_floor, fit_model
from .trainer import TrainConfig, derive_seed

log = logging.getLogger(__name__)

ESTIMATORS = ("dnn", "sdnn", "linear", "sample", "equal_weight")


class EstimationError(RuntimeError):
    pass


class UniverseError(ValueError):
    pass


class BacktestError(RuntimeError):
    pass


@dataclass(frozen=True)
class BacktestConfig:
    window: int = 120
    universe_sizes: tuple[int, ...] = (50,)
    tc_rate: float = 0.005
    estimator: str = "linear"
    periods_per_year: int = 12
    seed: int = 0
    refit_every: int = 1
    train_overrides: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.window < 2 or self.tc_rate < 0 or self.periods_per_year < 1 or self.refit_every < 1:
            raise ValueError("invalid backtest configuration")


@dataclass
class BacktestReport:
    estimator: str
    J: int
    window: int
    tc_rate: float
    dates: list
    gross_returns: np.ndarray
    net_returns: np.ndarray
    turnover: np.ndarray
    weights_history: list[pd.Series]
    SD: float
    AV: float
    SR: float
    SD_net: float
    AV_net: float
    SR_net: float
    PT: float

    @property
    def n_oos(self) -> int:
        return len(self.gross_returns)

    def summary(self) -> dict:
        return {
            "estimator": self.estimator, "J": self.J, "window": self.window, "tc_rate": self.tc_rate,
            "SD": self.SD, "AV": self.AV, "SR": self.SR,
            "SD_net": self.SD_net, "AV_net": self.AV_net, "SR_net": self.SR_net,
            "PT": self.PT, "n_oos": self.n_oos,
        }

    def series_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"date": self.dates, "gross": self.gross_returns,
                             "net": self.net_returns, "turnover": self.turnover})


def gmvp_weights(matrix, is_precision: bool = False, eig_floor: float | None = None) -> np.ndarray:
    """Global minimum variance weights ``S^-1 1 / (1' S^-1 1)``; shorts allowed.

    ``matrix`` is a covariance unless ``is_precision`` is set.  A covariance
    whose smallest eigenvalue falls below ``eig_floor`` is lifted to it first.
    """
    S = np.asarray(matrix, dtype=np.float64)
    J = S.shape[0]
    ones = np.ones(J)
    if is_precision:
        x = S @ ones
    else:
        S = 0.5 * (S + S.T)
        floor = default_eig_floor(S) if eig_floor is None else eig_floor
        lam_min = np.linalg.eigvalsh(S)[0]
        if lam_min < floor:
            S = S + (floor - lam_min) * np.eye(J)
        try:
            x = np.linalg.solve(S, ones)
        except np.linalg.LinAlgError as exc:
            raise EstimationError("covariance is singular after flooring") from exc
    total = x.sum()
    if not np.isfinite(total) or abs(total) < 1e-300:
        raise EstimationError("GMVP normalisation is degenerate")
    w = x / total
    return w / w.sum()


def drifted_weights(w, r_next) -> np.ndarray:
    """Weights after one period of price drift, before rebalancing."""
    w = np.asarray(w, dtype=np.float64)
    r = np.asarray(r_next, dtype=np.float64)
    gross = 1.0 + w @ r
    if gross == 0:
        raise BacktestError("portfolio return of -100% leaves no wealth to rebalance")
    return w * (1.0 + r) / gross


def net_return(w_held, w_new, r_next, c: float) -> float:
    """Return of ``w_held`` over the next period net of the cost of rebalancing to ``w_new``.

    The trade is measured against the drifted holdings and charged at rate
    ``c`` on end-of-period wealth ``1 + w_held' r``.
    """
    w_held = np.asarray(w_held, dtype=np.float64)
    r = np.asarray(r_next, dtype=np.float64)
    gross = float(w_held @ r)
    trade = float(np.abs(np.asarray(w_new) - drifted_weights(w_held, r)).sum())
    return gross - c * (1.0 + gross) * trade


def turnover_series(weights_history: Sequence, returns) -> tuple[np.ndarray, float]:
    """Per-period turnover ``sum |w_{h+1} - w_h^+|`` and its mean.

    ``weights_history`` holds ``H + 1`` weight vectors and ``returns`` the
    ``H`` return vectors realised between consecutive rebalancings.
    """
    W = [np.asarray(w, dtype=np.float64) for w in weights_history]
    R = np.asarray(returns, dtype=np.float64)
    if len(W) != len(R) + 1:
        raise ValueError("need one more weight vector than return periods")
    to = np.array([np.abs(W[h + 1] - drifted_weights(W[h], R[h])).sum() for h in range(len(R))])
    return to, float(to.mean()) if len(to) else 0.0


def summarize(series, periods_per_year: int = 12) -> tuple[float, float, float]:
    """Annualised (SD, AV, SR); SR is nan when SD is zero."""
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two returns")
    av = periods_per_year * float(x.mean())
    sd = math.sqrt(periods_per_year) * float(x.std(ddof=1))
    if sd <= 1e-15 * max(1.0, abs(av)):
        sd = 0.0
    sr = av / sd if sd > 0 else math.nan
    return sd, av, sr


def select_universe(returns: pd.DataFrame, ranks, J_target: int, at: int, window: int) -> list[int]:
    """Indices of the ``J_target`` highest-ranked assets with a complete window.

    ``ranks`` may be ``None``, a length-J vector, or a DataFrame of rank rows
    aligned with ``returns`` (the row at ``at - 1``, the last observed period,
    is used).  Without ranks assets are ordered by trailing mean absolute
    return.  Ties go to the earlier column.
    """
    if at - window < 0:
        raise UniverseError("window extends before the start of the panel")
    block = returns.iloc[at - window:at]
    complete = np.flatnonzero(block.notna().all(axis=0).to_numpy())
    if len(complete) < J_target:
        raise UniverseError(f"only {len(complete)} assets have a complete window, need {J_target}")
    if ranks is None:
        score = block.abs().mean(axis=0).to_numpy()
    elif isinstance(ranks, pd.DataFrame):
        score = ranks.iloc[at - 1].to_numpy(dtype=np.float64)
    else:
        score = np.asarray(ranks, dtype=np.float64)
    s = score[complete]
    order = sorted(range(len(complete)), key=lambda i: (-s[i], complete[i]))
    return sorted(int(complete[i]) for i in order[:J_target])


def _estimate_weights(cfg: BacktestConfig, R: np.ndarray, Fw: np.ndarray, step: int, cache: dict,
                      universe: tuple):
    J = R.shape[1]
    est = cfg.estimator
    if est == "equal_weight":
        return np.full(J, 1.0 / J)
    if est == "sample":
        return gmvp_weights(np.cov(R, rowvar=False, ddof=1).reshape(J, J))
    model = cache.get("model")
    if model is None or step % cfg.refit_every == 0 or cache.get("universe") != universe:
        train_cfg = None
        if est in ("dnn", "sdnn"):
            mode = "dense" if est == "dnn" else "sparse"
            train_cfg = TrainConfig.for_mode(mode, seed=derive_seed(cfg.seed, step), **cfg.train_overrides)
        model = fit_model(R, Fw, est, train_cfg)
        cache["model"], cache["universe"] = model, universe
    bundle = build_bundle(model, R, Fw)
    return gmvp_weights(bundle.precision_y, is_precision=True)


def rolling_backtest(returns: pd.DataFrame, factors: pd.DataFrame, cfg: BacktestConfig,
                     J: int | None = None, ranks=None) -> BacktestReport:
    """Re-estimate and rebalance every period over a trailing window.

    At each investment date ``h = window, ..., n - 1`` the weights are
    estimated on rows ``[h - window, h)`` and earn the returns of row ``h``.
    One further weight vector, estimated on the last ``window`` rows, prices
    the final rebalancing trade so that every period carries a turnover.
    """
    R_all = returns.to_numpy(dtype=np.float64)
    F_all = np.asarray(factors, dtype=np.float64)
    n, n_assets = R_all.shape
    if F_all.shape[0] != n:
        raise ValueError("returns and factors have different lengths")
    if cfg.window >= n - 1:
        raise ValueError(f"window {cfg.window} leaves fewer than two periods in a panel of {n}")
    size = J if J is not None else cfg.universe_sizes[0]
    if size > n_assets:
        raise UniverseError(f"universe size {size} exceeds the {n_assets} available assets")

    cache: dict = {}
    weights = []
    for step, h in enumerate(range(cfg.window, n + 1)):
        idx = select_universe(returns, ranks, size, h, cfg.window)
        R = R_all[h - cfg.window:h][:, idx]
        Fw = F_all[h - cfg.window:h]
        try:
            w = _estimate_weights(cfg, R, Fw, step, cache, tuple(idx))
        except Exception as exc:
            raise BacktestError(f"estimator {cfg.estimator} failed at period {h}: {exc}") from exc
        full = np.zeros(n_assets)
        full[idx] = w
        weights.append(full)

    periods = range(cfg.window, n)
    rets = np.nan_to_num(R_all[cfg.window:n])  # unheld assets may be missing; they carry zero weight
    gross = np.array([weights[k] @ rets[k] for k in range(len(periods))])
    net = np.array([net_return(weights[k], weights[k + 1], rets[k], cfg.tc_rate) for k in range(len(periods))])
    to, pt = turnover_series(weights, rets)

    ppy = cfg.periods_per_year
    sd, av, sr = summarize(gross, ppy)
    sd_n, av_n, sr_n = summarize(net, ppy)
    labels = list(returns.index[cfg.window:n])
    cols = list(returns.columns)
    history = [pd.Series(w, index=cols) for w in weights]
    return BacktestReport(
        estimator=cfg.estimator, J=size, window=cfg.window, tc_rate=cfg.tc_rate, dates=labels,
        gross_returns=gross, net_returns=net, turnover=to, weights_history=history,
        SD=sd, AV=av, SR=sr, SD_net=sd_n, AV_net=av_n, SR_net=sr_n, PT=pt,
    )
