"""Small-classifier engine: softmax regression and MLPs over a flat parameter vector.

Parameters live in one float64 array in canonical order: for each layer the
weight matrix of shape ``(fan_out, fan_in)`` in row-major order, then the bias.
Checkpoints, barriers and permutations all rely on that order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces inf/nan."""


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least input and class count")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if widths[-1] < 2:
            raise ValueError("class count must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.layer_widths[1:-1]

    @property
    def dim(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layer_slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """(weight slice, weight shape, bias slice) per layer in canonical order."""
        out = []
        offset = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            fan_in, fan_out = w[i], w[i + 1]
            ws = slice(offset, offset + fan_out * fan_in)
            offset += fan_out * fan_in
            bs = slice(offset, offset + fan_out)
            offset += fan_out
            out.append((ws, (fan_out, fan_in), bs))
        return out

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation", "relu"))

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; embedded in checkpoint headers."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        n = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != n or self.ids.shape[0] != n:
            raise ValueError("features, labels and ids disagree on n")
        if np.unique(self.ids).size != n:
            raise ValueError("duplicate example ids")
        if n and self.labels.min() < 0:
            raise ValueError("negative class label")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def check_classes(self, n_classes: int) -> None:
        if len(self) and self.labels.max() >= n_classes:
            raise ValueError(f"label {self.labels.max()} out of range for {n_classes} classes")

    def take(self, index) -> "Dataset":
        """Subset by positional index (array of ints or boolean mask)."""
        index = np.asarray(index)
        return Dataset(self.features[index], self.labels[index], self.ids[index])

    def positions(self, ids) -> np.ndarray:
        """Positional indices for the given example ids, in the order given."""
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        order = np.argsort(self.ids, kind="stable")
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = np.clip(pos, 0, len(self) - 1)
        found = order[pos]
        if ids.size and not np.array_equal(self.ids[found], ids):
            missing = np.setdiff1d(ids, self.ids)
            raise KeyError(f"unknown example ids: {missing[:10].tolist()}")
        return found

    def select(self, ids) -> "Dataset":
        return self.take(self.positions(ids))

    def exclude(self, ids) -> "Dataset":
        return self.take(~np.isin(self.ids, np.asarray(ids, dtype=np.int64)))


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.dim)
    for ws, (fan_out, fan_in), _ in spec.layer_slices():
        params[ws] = rng.standard_normal(fan_out * fan_in) / np.sqrt(fan_in)
    return params


def unflatten(spec: ModelSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer into the flat vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.dim,):
        raise ValueError(f"expected {spec.dim} parameters, got shape {params.shape}")
    return [(params[ws].reshape(shape), params[bs]) for ws, shape, bs in spec.layer_slices()]


def flatten(spec: ModelSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    out = np.empty(spec.dim)
    for (ws, shape, bs), (W, b) in zip(spec.layer_slices(), layers):
        out[ws] = np.asarray(W).reshape(-1)
        out[bs] = b
    return out


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0).astype(np.float64) if name == "relu" else 1.0 - a * a


def _check_inputs(spec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != model input dim {spec.input_dim}")
    return X


def _forward_cache(spec, params, X):
    layers = unflatten(spec, params)
    acts = [X]
    pre = []
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        pre.append(z)
        a = z if i == len(layers) - 1 else _act(spec.activation, z)
        acts.append(a)
    return layers, pre, acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, params, X) -> np.ndarray:
    X = _check_inputs(spec, X)
    return _forward_cache(spec, params, X)[2][-1]


def forward(spec: ModelSpec, params, X) -> np.ndarray:
    """Class-probability rows for a batch of inputs."""
    return softmax(logits(spec, params, X))


def per_example_loss(spec: ModelSpec, params, X, y) -> np.ndarray:
    X = _check_inputs(spec, X)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    logp = log_softmax(logits(spec, params, X))
    return -logp[np.arange(len(y)), y]


def loss(spec: ModelSpec, params, X, y, l1_coeff: float = 0.0) -> float:
    """Mean cross-entropy plus ``l1_coeff * ||params||_1``."""
    if len(np.asarray(y).reshape(-1)) == 0:
        raise ValueError("loss of an empty batch")
    if l1_coeff < 0:
        raise ValueError("l1_coeff must be non-negative")
    value = float(per_example_loss(spec, params, X, y).mean())
    if l1_coeff:
        value += l1_coeff * float(np.abs(params).sum())
    return value


def error_rate(spec: ModelSpec, params, X, y) -> float:
    return 1.0 - float(np.mean(predict(spec, params, X) == np.asarray(y)))


def _backward(spec, layers, pre, acts, y):
    """Per-example output deltas for every layer, last layer first in the list."""
    n = acts[0].shape[0]
    P = softmax(acts[-1])
    if not np.all(np.isfinite(P)):
        raise NonFiniteError("non-finite probabilities in forward pass")
    delta = P
    delta[np.arange(n), y] -= 1.0
    deltas = [delta]
    for i in range(len(layers) - 1, 0, -1):
        W = layers[i][0]
        delta = (delta @ W) * _act_grad(spec.activation, pre[i - 1], acts[i])
        deltas.append(delta)
    deltas.reverse()
    return deltas


def _prep(spec, X, y):
    X = _check_inputs(spec, X)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty batch")
    if len(y) != X.shape[0]:
        raise ValueError("features and labels disagree on batch size")
    return X, y


def grad_params(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Gradient of the mean cross-entropy (mean of per-example gradients)."""
    X, y = _prep(spec, X, y)
    layers, pre, acts = _forward_cache(spec, params, X)
    deltas = _backward(spec, layers, pre, acts, y)
    n = len(y)
    out = np.empty(spec.dim)
    for (ws, shape, bs), a, d in zip(spec.layer_slices(), acts[:-1], deltas):
        out[ws] = (d.T @ a).reshape(-1) / n
        out[bs] = d.sum(axis=0) / n
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite parameter gradient")
    return out


def per_example_grads(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Full n x dim matrix of per-example parameter gradients (small models only)."""
    X, y = _prep(spec, X, y)
    layers, pre, acts = _forward_cache(spec, params, X)
    deltas = _backward(spec, layers, pre, acts, y)
    out = np.empty((len(y), spec.dim))
    for (ws, shape, bs), a, d in zip(spec.layer_slices(), acts[:-1], deltas):
        out[:, ws] = (d[:, :, None] * a[:, None, :]).reshape(len(y), -1)
        out[:, bs] = d
    return out


def per_example_grad_norms(spec: ModelSpec, params, X, y) -> np.ndarray:
    """L2 norm of each example's parameter gradient.

    The weight gradient of one example is an outer product, so its squared
    Frobenius norm factorises as ``|delta|^2 * |a|^2``; no n x dim matrix is built.
    """
    X, y = _prep(spec, X, y)
    layers, pre, acts = _forward_cache(spec, params, X)
    deltas = _backward(spec, layers, pre, acts, y)
    sq = np.zeros(len(y))
    for a, d in zip(acts[:-1], deltas):
        dd = np.einsum("ij,ij->i", d, d)
        sq += dd * np.einsum("ij,ij->i", a, a) + dd
    if not np.all(np.isfinite(sq)):
        raise NonFiniteError("non-finite per-example gradient norm")
    return np.sqrt(sq)


def grad_inputs(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Per-example gradient of each example's own loss with respect to its input."""
    X, y = _prep(spec, X, y)
    layers, pre, acts = _forward_cache(spec, params, X)
    deltas = _backward(spec, layers, pre, acts, y)
    return deltas[0] @ layers[0][0]


def grad_input(spec: ModelSpec, params, x, y: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return grad_inputs(spec, params, x, [int(y)])[0]


def predict(spec: ModelSpec, params, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties.
    return np.argmax(logits(spec, params, X), axis=1)


def accuracy(spec: ModelSpec, params, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float(np.mean(predict(spec, params, dataset.features) == dataset.labels))


def confidences(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Softmax probability assigned to the true class, per example."""
    X, y = _prep(spec, X, y)
    P = forward(spec, params, X)
    return P[np.arange(len(y)), y]


def confidence(spec: ModelSpec, params, x, y: int) -> float:
    return float(confidences(spec, params, np.asarray(x).reshape(1, -1), [int(y)])[0])
