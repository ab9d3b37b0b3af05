"""Scoring functions shared by every learner.

A :class:`RankerParams` is either a linear model (one ``(F, 1)`` layer) or a
small ELU MLP. All learners talk to it through the same four calls:
:func:`forward` / :func:`backward` for batches of documents, and
:func:`sgd_update` to apply a gradient. Gradients are themselves
``RankerParams`` with the same shapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._validation import check_features

LN_EPS = 1e-5
KINDS = ("linear", "mlp")
DEFAULT_HIDDEN = (64, 32)


def elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass(eq=False)
class RankerParams:
    """Layer weights ``W[l]`` of shape ``(fan_in, fan_out)`` and biases ``b[l]``."""

    kind: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    layer_norm: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} are incompatible")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[0]} inputs, previous layer emits {self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("last layer must have a single output")
        if self.kind == "linear" and (len(self.weights) != 1 or self.layer_norm):
            raise ValueError("linear rankers have exactly one layer and no normalization")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "RankerParams":
        return RankerParams(self.kind, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.layer_norm)

    def zeros_like(self) -> "RankerParams":
        return RankerParams(self.kind, [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases], self.layer_norm)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, vec) -> "RankerParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected a vector of {self.n_params} parameters, got shape {vec.shape}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos : pos + b.size].copy())
            pos += b.size
        return RankerParams(self.kind, weights, biases, self.layer_norm)

    def same_shape(self, other: "RankerParams") -> bool:
        return (
            self.kind == other.kind
            and len(self.weights) == len(other.weights)
            and all(a.shape == b.shape for a, b in zip(self.weights, other.weights))
        )

    def __eq__(self, other):
        if not isinstance(other, RankerParams):
            return NotImplemented
        return (
            self.same_shape(other)
            and self.layer_norm == other.layer_norm
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "layer_norm": self.layer_norm,
            "dims": self.dims,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankerParams":
        params = cls(d["kind"], [np.array(w) for w in d["weights"]], [np.array(b) for b in d["biases"]], d.get("layer_norm", False))
        if "dims" in d and list(d["dims"]) != params.dims:
            raise ValueError(f"checkpoint dims {d['dims']} disagree with weight shapes {params.dims}")
        return params

    def save(self, path) -> None:
        from ._io import atomic_write_json

        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "RankerParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


Gradient = RankerParams


def init_params(
    kind: str,
    n_features: int,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    layer_norm: bool = False,
    rng: np.random.Generator | int | None = None,
) -> RankerParams:
    """Zeros for linear rankers; U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights for MLPs."""
    if kind == "linear":
        return RankerParams("linear", [np.zeros((n_features, 1))], [np.zeros(1)])
    rng = np.random.default_rng(rng)
    dims = [n_features, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RankerParams("mlp", weights, biases, layer_norm)


def _layer_norm(z):
    mu = z.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(z.var(axis=-1, keepdims=True) + LN_EPS)
    return (z - mu) / sigma, sigma


def forward(params: RankerParams, x: np.ndarray, keep_cache: bool = True):
    """Score a batch of documents.

    ``x`` may have any leading shape ending in the feature axis; the
    returned scores drop that axis. The cache feeds :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"expected {params.input_dim} features, got {x.shape[-1]}")
    lead = x.shape[:-1]
    h = x.reshape(-1, params.input_dim)
    cache = []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i == n_layers - 1:
            cache.append((h, None, None, None))
            h = z
            break
        sigma = zhat = None
        if params.layer_norm:
            zhat, sigma = _layer_norm(z)
            pre = zhat
        else:
            pre = z
        cache.append((h, pre, zhat, sigma))
        h = elu(pre)
    scores = h[:, 0].reshape(lead)
    return (scores, (lead, cache)) if keep_cache else scores


def backward(params: RankerParams, cache, dscores: np.ndarray) -> RankerParams:
    """Accumulate d(loss)/d(params) given d(loss)/d(scores) for the cached batch."""
    lead, layers = cache
    g = np.asarray(dscores, dtype=np.float64).reshape(-1, 1)
    grads_w = [None] * len(layers)
    grads_b = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        h_in, pre, zhat, sigma = layers[i]
        if pre is not None:
            g = g * elu_grad(pre)
            if params.layer_norm:
                g = (g - g.mean(axis=-1, keepdims=True) - zhat * (g * zhat).mean(axis=-1, keepdims=True)) / sigma
        grads_w[i] = h_in.T @ g
        grads_b[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i].T
    return RankerParams(params.kind, grads_w, grads_b, params.layer_norm)


def score(params: RankerParams, features) -> float:
    x = check_features(features, params.input_dim, ensure_2d=False)
    return float(forward(params, x, keep_cache=False))


def score_batch(params: RankerParams, features) -> np.ndarray:
    return forward(params, features, keep_cache=False)


def score_with_gradient(params: RankerParams, features) -> tuple[float, RankerParams]:
    """Score one document and return d(score)/d(params)."""
    x = check_features(features, params.input_dim, ensure_2d=False)
    s, cache = forward(params, x[None, :])
    return float(s[0]), backward(params, cache, np.ones(1))


def rank(params: RankerParams, query) -> np.ndarray:
    """Candidate indices by descending score; ties keep candidate order."""
    features = query.features if hasattr(query, "features") else query
    s = forward(params, features, keep_cache=False)
    return rank_scores(s)


def rank_scores(scores) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def sgd_update(params: RankerParams, gradient: RankerParams, learning_rate: float) -> RankerParams:
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if not params.same_shape(gradient) or any(a.shape != b.shape for a, b in zip(params.biases, gradient.biases)):
        raise ValueError("gradient shape does not match params")
    return RankerParams(
        params.kind,
        [w - learning_rate * g for w, g in zip(params.weights, gradient.weights)],
        [b - learning_rate * g for b, g in zip(params.biases, gradient.biases)],
        params.layer_norm,
    )


def add_scaled(params: RankerParams, direction: np.ndarray, step: float) -> RankerParams:
    """``params + step * direction`` for a flat direction vector."""
    return params.with_flat(params.flat() + step * np.asarray(direction))
