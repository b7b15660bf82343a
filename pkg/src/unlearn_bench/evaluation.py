"""Unlearning evaluation: accuracies, confidence-based membership inference, and GUS."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import model as mk
from .model import Dataset, ModelSpec

log = logging.getLogger(__name__)

GUS_SIGMA_SQ = 0.062
GUS_SIGMA_SQ_ORIGINAL = 0.32
_POISON_MAGIC = b"GUSP"
_POISON_VERSION = 1


def accuracy_metrics(spec: ModelSpec, params, forget: Dataset, retain: Dataset, test: Dataset):
    """(UA, RA, utility) with UA = 1 - forget accuracy."""
    for name, d in (("forget", forget), ("retain", retain), ("test", test)):
        if len(d) == 0:
            raise ValueError(f"{name} set is empty")
    fa = mk.accuracy(spec, params, forget)
    return 1.0 - fa, mk.accuracy(spec, params, retain), mk.accuracy(spec, params, test)


class MIAResult(NamedTuple):
    score: float
    degenerate: bool


def true_class_confidence(spec: ModelSpec, params, data: Dataset) -> np.ndarray:
    return mk.confidences(spec, params, data.features, data.labels)


def fit_logistic_1d(x: np.ndarray, label: np.ndarray, tol: float = 1e-8, max_iter: int = 10000):
    """Full-batch gradient descent on mean logistic loss with one feature and a bias.

    Returns (w, b, iterations). The caller standardises x, which keeps the
    Hessian bounded by 1/4 * (1 + 1) and makes a step size of 2 safe.
    """
    w = b = 0.0
    lr = 2.0
    it = 0
    for it in range(1, max_iter + 1):
        z = np.clip(w * x + b, -500, 500)
        r = 1.0 / (1.0 + np.exp(-z)) - label
        gw = float(np.mean(r * x))
        gb = float(np.mean(r))
        if max(abs(gw), abs(gb)) <= tol:
            break
        w -= lr * gw
        b -= lr * gb
    return w, b, it


def _balanced(a: np.ndarray, b: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    k = min(a.size, b.size)
    if a.size > k:
        a = a[np.sort(rng.choice(a.size, k, replace=False))]
    if b.size > k:
        b = b[np.sort(rng.choice(b.size, k, replace=False))]
    return a, b


def mia_score_from_features(member_x, nonmember_x, forget_x, seed: int = 0) -> MIAResult:
    """Fraction of forget examples the attacker places on the non-member side."""
    member_x = np.asarray(member_x, dtype=np.float64).reshape(-1)
    nonmember_x = np.asarray(nonmember_x, dtype=np.float64).reshape(-1)
    forget_x = np.asarray(forget_x, dtype=np.float64).reshape(-1)
    if member_x.size == 0 or nonmember_x.size == 0:
        raise ValueError("member and non-member samples must be non-empty")
    rng = np.random.default_rng(seed)
    member_x, nonmember_x = _balanced(member_x, nonmember_x, rng)
    x = np.concatenate([member_x, nonmember_x])
    label = np.concatenate([np.ones(member_x.size), np.zeros(nonmember_x.size)])
    mu, sd = x.mean(), x.std()
    if not sd > 1e-12:
        log.warning("membership attack degenerate: all attacker features are equal")
        return MIAResult(0.5, True)
    w, b, _ = fit_logistic_1d((x - mu) / sd, label)
    z = w * (forget_x - mu) / sd + b
    # P(member) < 0.5  <=>  logit < 0
    return MIAResult(float(np.mean(z < 0)), False)


def mia_score(
    spec: ModelSpec,
    params,
    members: Dataset,
    nonmembers: Dataset,
    forget: Dataset,
    seed: int = 0,
    feature: Callable[[ModelSpec, np.ndarray, Dataset], np.ndarray] = true_class_confidence,
) -> MIAResult:
    """Logistic-regression attack on a per-example model feature (true-class confidence)."""
    return mia_score_from_features(
        feature(spec, params, members),
        feature(spec, params, nonmembers),
        feature(spec, params, forget),
        seed,
    )


@dataclass
class PoisonRecord:
    ids: np.ndarray
    noise: np.ndarray  # one input-shaped row per id
    sigma_sq: float

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.noise = np.atleast_2d(np.asarray(self.noise, dtype=np.float64))
        if self.noise.shape[0] != self.ids.size:
            raise ValueError("one noise row per poisoned id required")

    def save(self, path) -> None:
        """GUSP | u32 version | u64 count | u64 dim | f64 sigma_sq | i64 ids | f64 noise rows (LE)."""
        k, d = self.noise.shape
        with open(path, "wb") as f:
            f.write(_POISON_MAGIC)
            f.write(struct.pack("<IQQd", _POISON_VERSION, k, d, self.sigma_sq))
            f.write(self.ids.astype("<i8").tobytes())
            f.write(self.noise.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PoisonRecord":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != _POISON_MAGIC:
            raise ValueError(f"{path}: not a poison record")
        version, k, d, sigma_sq = struct.unpack_from("<IQQd", blob, 4)
        if version != _POISON_VERSION:
            raise ValueError(f"{path}: unsupported poison record version {version}")
        off = 4 + struct.calcsize("<IQQd")
        ids = np.frombuffer(blob, dtype="<i8", count=k, offset=off)
        noise = np.frombuffer(blob, dtype="<f8", count=k * d, offset=off + 8 * k).reshape(k, d)
        return cls(ids.astype(np.int64), noise.astype(np.float64), sigma_sq)


def gus_poison(dataset: Dataset, forget_ids, sigma_sq: float = GUS_SIGMA_SQ, seed: int = 0):
    """Add N(0, sigma_sq) noise to the forget rows; returns (poisoned dataset, record)."""
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be non-negative")
    forget_ids = np.asarray(forget_ids, dtype=np.int64).reshape(-1)
    pos = dataset.positions(forget_ids)
    rng = np.random.default_rng(seed)
    noise = np.sqrt(sigma_sq) * rng.standard_normal((forget_ids.size, dataset.dim))
    X = dataset.features.copy()
    X[pos] += noise
    return Dataset(X, dataset.labels.copy(), dataset.ids.copy()), PoisonRecord(forget_ids, noise, sigma_sq)


def gus_contributions(grads: np.ndarray, noise: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """<grad_i, noise_i> / |grad_i| per row; rows with a vanishing gradient give 0."""
    norms = np.linalg.norm(grads, axis=1)
    dots = np.einsum("ij,ij->i", grads, noise)
    out = np.zeros(len(norms))
    ok = norms >= eps
    out[ok] = dots[ok] / norms[ok]
    return out


def gus_score(spec: ModelSpec, params, clean_forget: Dataset, record: PoisonRecord) -> float:
    """Mean normalised inner product of clean-input loss gradients with the stored poison noise."""
    pos = clean_forget.positions(record.ids)
    X = clean_forget.features[pos]
    y = clean_forget.labels[pos]
    grads = mk.grad_inputs(spec, params, X, y)
    return float(gus_contributions(grads, record.noise).mean())
