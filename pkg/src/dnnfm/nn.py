"""Feedforward ReLU networks with a scalar least-squares head.

Weights follow the ``(fan_out, fan_in)`` convention so a hidden layer maps
``h -> relu(h @ W.T + b)``.  All kernels are written against *stacked*
parameters with a leading model axis so that many per-asset networks can be
evaluated and differentiated in one pass; the single-network functions are
thin wrappers that add and remove that axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when inputs do not match a network's declared dimensions."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    depth: int
    widths: tuple[int, ...]
    output_dim: int = field(default=1, init=False)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.widths) != self.depth:
            raise ValueError(f"expected {self.depth} widths, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError("every width must be >= 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        """Layer sizes ``(p_0, p_1, ..., p_L, p_{L+1})``."""
        return (self.input_dim, *self.widths, self.output_dim)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "depth": self.depth, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(int(d["input_dim"]), int(d["depth"]), tuple(d["widths"]))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class NetworkParams:
    """Layer weights and biases; immutable once built."""

    spec: NetworkSpec
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        layers = tuple((_frozen(W), _frozen(b)) for W, b in self.layers)
        sizes = self.spec.sizes
        if len(layers) != len(sizes) - 1:
            raise ShapeError(f"expected {len(sizes) - 1} layers, got {len(layers)}")
        for l, (W, b) in enumerate(layers):
            if W.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise ShapeError(
                    f"layer {l}: W{W.shape} b{b.shape}, expected "
                    f"W{(sizes[l + 1], sizes[l])} b{(sizes[l + 1],)}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite entries")
        object.__setattr__(self, "layers", layers)

    @property
    def weights(self) -> list[np.ndarray]:
        return [W for W, _ in self.layers]

    @property
    def biases(self) -> list[np.ndarray]:
        return [b for _, b in self.layers]

    def flat(self) -> np.ndarray:
        """All entries as one vector, layer by layer, ``W`` before ``b``."""
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def map(self, fn) -> "NetworkParams":
        return NetworkParams(self.spec, tuple((fn(W), fn(b)) for W, b in self.layers))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        spec = NetworkSpec.from_dict(d["spec"])
        layers = tuple(
            (np.asarray(layer["W"], dtype=np.float64).reshape(spec.sizes[l + 1], spec.sizes[l]),
             np.asarray(layer["b"], dtype=np.float64))
            for l, layer in enumerate(d["layers"])
        )
        return cls(spec, layers)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NetworkParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SparsityReport:
    nonzero_count: int
    max_abs_weight: float
    total_count: int


def relu(x):
    return np.maximum(x, 0.0)


def param_count(spec: NetworkSpec) -> int:
    sizes = spec.sizes
    return sum((sizes[l] + 1) * sizes[l + 1] for l in range(len(sizes) - 1))


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Symmetric-uniform weights on ``[-s, s]`` with ``s = sqrt(2 / fan_in)``.

    Weights are clipped to ``[-1, 1]`` so the unit weight bound of the sparse
    networks already holds at initialisation.  Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    sizes = spec.sizes
    layers = []
    for l in range(len(sizes) - 1):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        scale = np.sqrt(2.0 / fan_in)
        W = np.clip(rng.uniform(-scale, scale, size=(fan_out, fan_in)), -1.0, 1.0)
        layers.append((W, np.zeros(fan_out)))
    return NetworkParams(spec, tuple(layers))


def clip_weights(params: NetworkParams, bound: float = 1.0) -> NetworkParams:
    if bound <= 0:
        raise ValueError("bound must be positive")
    return params.map(lambda a: np.clip(a, -bound, bound))


def sparsity_report(params: NetworkParams, zero_tol: float = 1e-8) -> SparsityReport:
    if zero_tol < 0:
        raise ValueError("zero_tol must be nonnegative")
    flat = params.flat()
    return SparsityReport(
        nonzero_count=int(np.count_nonzero(np.abs(flat) > zero_tol)),
        max_abs_weight=float(np.max(np.abs(flat))) if flat.size else 0.0,
        total_count=param_count(params.spec),
    )


# ---------------------------------------------------------------------------
# stacked kernels: Ws[l] has shape (M, fan_out, fan_in), bs[l] (M, fan_out)
# ---------------------------------------------------------------------------


def stacked_forward(Ws: Sequence[np.ndarray], bs: Sequence[np.ndarray], X: np.ndarray,
                    masks: Sequence[np.ndarray] | None = None):
    """Evaluate ``M`` networks on ``X`` of shape ``(M, B, d)``.

    ``masks[l]`` (shape ``(M, p_{l+1})``) multiplies the post-activation of
    hidden layer ``l``; used for inverted dropout.  Returns the outputs of
    shape ``(M, B)`` and the cache needed by :func:`stacked_backward`.
    """
    h = X
    pre, post = [], [X]
    L = len(Ws) - 1
    for l in range(L):
        z = np.matmul(h, np.swapaxes(Ws[l], 1, 2)) + bs[l][:, None, :]
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[l][:, None, :]
        pre.append(z)
        post.append(h)
    out = np.matmul(h, np.swapaxes(Ws[L], 1, 2))[..., 0] + bs[L]
    return out, (pre, post)


def stacked_backward(Ws, cache, dout: np.ndarray, masks=None):
    """Reverse pass given ``dout = d loss / d output`` of shape ``(M, B)``.

    ReLU's derivative at zero is taken as zero.
    """
    pre, post = cache
    L = len(Ws) - 1
    gW = [None] * (L + 1)
    gb = [None] * (L + 1)
    delta = dout[..., None]  # (M, B, 1)
    for l in range(L, -1, -1):
        gW[l] = np.matmul(np.swapaxes(delta, 1, 2), post[l])
        gb[l] = delta.sum(axis=1)
        if l == 0:
            break
        delta = np.matmul(delta, Ws[l])
        if masks is not None:
            delta = delta * masks[l - 1][:, None, :]
        delta = delta * (pre[l - 1] > 0.0)
    return gW, gb


def stack(params_list: Sequence[NetworkParams]):
    n_layers = len(params_list[0].layers)
    Ws = [np.stack([p.layers[l][0] for p in params_list]) for l in range(n_layers)]
    bs = [np.stack([p.layers[l][1] for p in params_list]) for l in range(n_layers)]
    return Ws, bs


def unstack(spec: NetworkSpec, Ws, bs, index: int) -> NetworkParams:
    return NetworkParams(spec, tuple((W[index], b[index]) for W, b in zip(Ws, bs)))


def forward(params: NetworkParams, x):
    """Network output for one input vector (returns a float) or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ShapeError(f"expected inputs with {params.spec.input_dim} columns, got shape {x.shape}")
    Ws, bs = stack([params])
    out, _ = stacked_forward(Ws, bs, X[None])
    return float(out[0, 0]) if single else out[0]
