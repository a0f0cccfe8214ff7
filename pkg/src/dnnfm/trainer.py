"""Mini-batch least-squares training with Adam, l1, dropout and early stopping.

:func:`fit_many` trains one network per response column in lock-step, with
stacked weight tensors.  Each column owns its RNG streams (keyed by its seed,
the lambda index and the epoch) and its own early-stopping state, so a
column's result does not depend on which other columns share the batch.
:func:`fit` is the single-response special case.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .nn import (
    NetworkParams,
    NetworkSpec,
    ShapeError,
    forward,
    init_params,
    stack,
    stacked_backward,
    stacked_forward,
    unstack,
)

log = logging.getLogger(__name__)

MODES = ("dense", "sparse")
SPARSE_LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2)
SPARSE_DROPOUT = 0.2
WEIGHT_BOUND = 1.0


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.0
    l1_lambda_grid: tuple[float, ...] = (0.0,)
    patience: int = 20
    val_fraction: float = 0.2
    mode: str = "dense"
    seed: int = 0
    # hidden-layer widths of the per-asset networks; depth = len(widths)
    widths: tuple[int, ...] = (16, 16)

    def __post_init__(self):
        object.__setattr__(self, "l1_lambda_grid", tuple(float(v) for v in self.l1_lambda_grid))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("max_epochs >= 0, batch_size >= 1 and patience >= 1 required")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if not self.l1_lambda_grid or any(v < 0 for v in self.l1_lambda_grid):
            raise ConfigError("l1_lambda_grid must be a nonempty list of nonnegative reals")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be a nonempty list of positive integers")
        if self.mode == "dense" and (self.dropout_rate != 0 or self.l1_lambda_grid != (0.0,)):
            raise ConfigError("dense mode trains without dropout and with l1_lambda_grid = (0,)")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        """Defaults for ``mode``; sparse mode switches on dropout and the l1 grid."""
        if mode == "sparse":
            overrides.setdefault("dropout_rate", SPARSE_DROPOUT)
            overrides.setdefault("l1_lambda_grid", SPARSE_LAMBDA_GRID)
        return cls(mode=mode, **overrides)

    def network_spec(self, input_dim: int) -> NetworkSpec:
        return NetworkSpec(input_dim, len(self.widths), self.widths)


@dataclass
class FitResult:
    params: NetworkParams
    train_curve: list[float]
    val_curve: list[float]
    stopped_epoch: int  # index of the last epoch run
    chosen_lambda: float
    # best validation MSE reached for each lambda in the grid (nan if diverged)
    lambda_scores: dict[float, float] = field(default_factory=dict)

    @property
    def best_val(self) -> float:
        return min(self.val_curve) if self.val_curve else math.nan


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from a tuple of nonnegative integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def split_train_val(n: int, val_fraction: float = 0.2) -> tuple[range, range]:
    """Chronological split: the first ``floor(n * (1 - val_fraction))`` rows train."""
    if not 0 < val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)")
    if n < 5:
        raise ConfigError(f"need at least 5 observations, got {n}")
    n_train = int(math.floor(n * (1.0 - val_fraction)))
    if n_train < 1 or n_train >= n:
        raise ConfigError(f"n={n} with val_fraction={val_fraction} leaves an empty segment")
    return range(0, n_train), range(n_train, n)


def loss(params: NetworkParams, X, y, lam: float = 0.0) -> float:
    """Mean squared error plus ``lam`` times the l1 norm of the weights (not biases)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("loss of an empty sample")
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    resid = y - forward(params, X)
    penalty = lam * sum(np.abs(W).sum() for W in params.weights) if lam else 0.0
    return float(np.mean(resid**2) + penalty)


def gradient(params: NetworkParams, X_batch, y_batch) -> NetworkParams:
    """Exact gradient of the batch mean squared error, congruent to ``params``."""
    X = np.asarray(X_batch, dtype=np.float64)
    y = np.asarray(y_batch, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("gradient of an empty batch")
    Ws, bs = stack([params])
    out, cache = stacked_forward(Ws, bs, X[None])
    dout = 2.0 * (out - y[None]) / len(y)
    gW, gb = stacked_backward(Ws, cache, dout)
    return NetworkParams(params.spec, tuple((w[0], b[0]) for w, b in zip(gW, gb)))


def _adam_update(arrays, grads, m, v, t, cfg):
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out_p, out_m, out_v = [], [], []
    for p, g, mi, vi in zip(arrays, grads, m, v):
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * (g * g)
        step = cfg.learning_rate * (mi / c1) / (np.sqrt(vi / c2) + cfg.adam_eps)
        out_p.append(p - step)
        out_m.append(mi)
        out_v.append(vi)
    return out_p, out_m, out_v


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState | None,
              cfg: TrainConfig) -> tuple[NetworkParams, AdamState]:
    flat_p = [a for layer in params.layers for a in layer]
    flat_g = [a for layer in grads.layers for a in layer]
    if state is None:
        state = AdamState.zeros_like(flat_p)
    t = state.t + 1
    new_p, m, v = _adam_update(flat_p, flat_g, state.m, state.v, t, cfg)
    layers = tuple((new_p[2 * i], new_p[2 * i + 1]) for i in range(len(params.layers)))
    return NetworkParams(params.spec, layers), AdamState(m, v, t)


def _dropout_masks(u: np.ndarray, widths: Sequence[int], rate: float) -> list[np.ndarray]:
    """Inverted-dropout masks disabling exactly ``ceil(rate * width)`` units.

    ``u`` holds uniforms of shape ``(M, L, max_width)``; the lowest-ranked
    units in each row are the ones switched off.
    """
    masks = []
    for l, p in enumerate(widths):
        k = math.ceil(rate * p)
        ranks = np.argsort(np.argsort(u[:, l, :p], axis=1, kind="stable"), axis=1, kind="stable")
        masks.append((ranks >= k) / (1.0 - rate))
    return masks


def _mse(Ws, bs, X, Y):
    """Per-model MSE on shared inputs ``X`` (n, d) against ``Y`` (n, M)."""
    M = Y.shape[1]
    out, _ = stacked_forward(Ws, bs, np.broadcast_to(X, (M, *X.shape)))
    with np.errstate(over="ignore", invalid="ignore"):
        return np.mean((out - Y.T) ** 2, axis=1)


def _fit_one_lambda(Xtr, Ytr, Xva, Yva, spec, cfg, seeds, lam, lam_index, init):
    M = Ytr.shape[1]
    n_train = Xtr.shape[0]
    L = spec.depth
    sparse = cfg.mode == "sparse"
    rate = cfg.dropout_rate if sparse else 0.0

    Ws, bs = [w.copy() for w in init[0]], [b.copy() for b in init[1]]
    best_Ws, best_bs = [w.copy() for w in Ws], [b.copy() for b in bs]
    n_arr = 2 * len(Ws)
    m = [np.zeros_like(a) for a in (*Ws, *bs)]
    v = [np.zeros_like(a) for a in (*Ws, *bs)]
    t = 0

    active = np.ones(M, dtype=bool)
    diverged = np.zeros(M, dtype=bool)
    best_val = np.full(M, np.inf)
    since_best = np.zeros(M, dtype=int)
    train_curves = [[] for _ in range(M)]
    val_curves = [[] for _ in range(M)]

    batch = min(cfg.batch_size, n_train)
    n_batches = math.ceil(n_train / batch)
    max_width = max(spec.widths)
    cols = np.arange(M)[:, None]
    YtrT = Ytr.T

    for epoch in range(cfg.max_epochs):
        if not active.any():
            break
        perms = np.tile(np.arange(n_train), (M, 1))
        u = np.zeros((M, n_batches, L, max_width))
        for j in np.flatnonzero(active):
            rng = np.random.default_rng([seeds[j], lam_index, epoch])
            perms[j] = rng.permutation(n_train)
            if rate > 0:
                u[j] = rng.random((n_batches, L, max_width))

        for b in range(n_batches):
            idx = perms[:, b * batch:(b + 1) * batch]
            Xb = Xtr[idx]
            yb = YtrT[cols, idx]
            masks = _dropout_masks(u[:, b], spec.widths, rate) if rate > 0 else None
            out, cache = stacked_forward(Ws, bs, Xb, masks)
            ok = np.isfinite(out).all(axis=1)
            if not ok[active].all():
                bad = np.flatnonzero(active & ~ok)
                log.warning("lambda=%g: non-finite output for models %s at epoch %d; aborting them",
                            lam, bad.tolist(), epoch)
                diverged[bad] = True
                active[bad] = False
                if not active.any():
                    break
            dout = np.where(ok[:, None], 2.0 * (out - yb) / idx.shape[1], 0.0)
            gW, gb = stacked_backward(Ws, cache, dout, masks)
            if lam:
                gW = [g + lam * np.sign(W) for g, W in zip(gW, Ws)]
            t += 1
            arrays = [*Ws, *bs]
            new, m_new, v_new = _adam_update(arrays, [*gW, *gb], m, v, t, cfg)
            keep = active
            for i in range(n_arr):
                shape = (M,) + (1,) * (arrays[i].ndim - 1)
                sel = keep.reshape(shape)
                new_i = new[i]
                if sparse:
                    new_i = np.clip(new_i, -WEIGHT_BOUND, WEIGHT_BOUND)
                arrays[i] = np.where(sel, new_i, arrays[i])
                m[i] = np.where(sel, m_new[i], m[i])
                v[i] = np.where(sel, v_new[i], v[i])
            Ws, bs = arrays[: len(Ws)], arrays[len(Ws):]

        tr = _mse(Ws, bs, Xtr, Ytr)
        va = _mse(Ws, bs, Xva, Yva)
        blown = active & ~(np.isfinite(va) & np.isfinite(tr))
        if blown.any():
            log.warning("lambda=%g: non-finite loss for models %s at epoch %d; aborting them",
                        lam, np.flatnonzero(blown).tolist(), epoch)
            diverged |= blown
            active &= ~blown
        for j in np.flatnonzero(active):
            train_curves[j].append(float(tr[j]))
            val_curves[j].append(float(va[j]))
        improved = active & (va < best_val)
        if improved.any():
            for l in range(len(Ws)):
                best_Ws[l][improved] = Ws[l][improved]
                best_bs[l][improved] = bs[l][improved]
            best_val[improved] = va[improved]
        since_best = np.where(improved, 0, since_best + 1)
        active &= ~(since_best >= cfg.patience)

    return best_Ws, best_bs, train_curves, val_curves, best_val, diverged


def fit_many(X, Y, spec: NetworkSpec, cfg: TrainConfig, seeds: Sequence[int]) -> list[FitResult]:
    """Train one network per column of ``Y`` on the shared regressors ``X``.

    For every lambda in the grid the networks start from ``init_params(spec,
    seed)``, run shuffled mini-batch Adam epochs on the chronological training
    segment and keep the parameters with the lowest validation MSE.  Each
    column then keeps the lambda whose best validation MSE is smallest.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[1] != spec.input_dim or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"X{X.shape} / Y{Y.shape} inconsistent with input_dim={spec.input_dim}")
    if len(seeds) != Y.shape[1]:
        raise ShapeError("one seed per response column required")
    n = X.shape[0]
    tr_idx, va_idx = split_train_val(n, cfg.val_fraction)
    Xtr, Ytr = X[tr_idx.start:tr_idx.stop], Y[tr_idx.start:tr_idx.stop]
    Xva, Yva = X[va_idx.start:va_idx.stop], Y[va_idx.start:va_idx.stop]
    M = Y.shape[1]

    init = stack([init_params(spec, s) for s in seeds])
    grid = cfg.l1_lambda_grid if cfg.mode == "sparse" else (0.0,)
    runs = [
        _fit_one_lambda(Xtr, Ytr, Xva, Yva, spec, cfg, seeds, lam, k, init)
        for k, lam in enumerate(grid)
    ]

    results = []
    for j in range(M):
        scores = np.array([np.nan if r[5][j] else r[4][j] for r in runs])
        if np.all(np.isnan(scores)):
            raise TrainingError(f"training diverged for every lambda (column {j})")
        k = int(np.nanargmin(scores))
        bW, bb, trc, vac, _, _ = runs[k]
        results.append(
            FitResult(
                params=unstack(spec, bW, bb, j),
                train_curve=trc[j],
                val_curve=vac[j],
                stopped_epoch=max(len(vac[j]) - 1, 0),
                chosen_lambda=grid[k],
                lambda_scores={lam: float(s) for lam, s in zip(grid, scores)},
            )
        )
    return results


def fit(X, y, spec: NetworkSpec, cfg: TrainConfig) -> FitResult:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ShapeError("y must be a vector")
    return fit_many(X, y[:, None], spec, cfg, [cfg.seed])[0]


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
