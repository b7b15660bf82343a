"""Proxy difficulty scores, difficulty-stratified forget sets and rank statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import model as mk
from .model import Dataset, ModelSpec
from .trainer import Trajectory

SPLIT_LABELS = ("bottom", "q1", "q2", "q3", "top")


@dataclass
class ScoreVector:
    ids: np.ndarray
    scores: np.ndarray
    metric: str
    higher_is_harder: bool = True

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.ids.shape != self.scores.shape:
            raise ValueError("one score per id required")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"non-finite scores in {self.metric}")

    def __len__(self) -> int:
        return self.ids.size

    def difficulty_order(self) -> np.ndarray:
        """Positions sorted easy -> hard; ties broken by ascending id."""
        key = self.scores if self.higher_is_harder else -self.scores
        return np.lexsort((self.ids, key))

    def aligned(self, other: "ScoreVector") -> tuple[np.ndarray, np.ndarray]:
        """Scores of both vectors in a common id order."""
        if self.ids.size != other.ids.size or not np.array_equal(np.sort(self.ids), np.sort(other.ids)):
            raise ValueError("score vectors cover different ids")
        a = np.argsort(self.ids, kind="stable")
        b = np.argsort(other.ids, kind="stable")
        return self.scores[a], other.scores[b]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "score", "metric", "higher_is_harder"])
            for i, s in zip(self.ids, self.scores):
                w.writerow([int(i), repr(float(s)), self.metric, int(self.higher_is_harder)])

    @classmethod
    def from_csv(cls, path) -> "ScoreVector":
        ids, scores, metric, hih = [], [], "score", True
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                ids.append(int(row["id"]))
                scores.append(float(row["score"]))
                metric = row["metric"]
                hih = row["higher_is_harder"].strip().lower() in ("1", "true")
        return cls(np.array(ids), np.array(scores), metric, hih)


@dataclass
class ForgetSplit:
    forget_ids: np.ndarray
    retain_ids: np.ndarray
    label: str
    mean_score: float
    metric: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "metric": self.metric,
            "mean_score": self.mean_score,
            "forget_ids": [int(i) for i in self.forget_ids],
            "retain_ids": [int(i) for i in self.retain_ids],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForgetSplit":
        return cls(
            np.asarray(d["forget_ids"], dtype=np.int64),
            np.asarray(d["retain_ids"], dtype=np.int64),
            d["label"],
            float(d["mean_score"]),
            d.get("metric", ""),
        )


def proxy_grad_norm(trajectory: Trajectory, which: str = "average") -> ScoreVector:
    G = trajectory.grad_norm_log
    if G.shape[0] == 0:
        raise ValueError("trajectory has no logged checkpoints")
    if which == "mid":
        s = G[G.shape[0] // 2]
    elif which == "end":
        s = G[-1]
    elif which == "average":
        s = G.mean(axis=0)
    else:
        raise ValueError(f"unknown gradient-norm proxy {which!r}")
    return ScoreVector(trajectory.ids, s, f"grad_norm_{which}", True)


def proxy_c(trajectory: Trajectory, confidence_log: np.ndarray | None = None) -> ScoreVector:
    """Trajectory-averaged true-class confidence; low means hard.

    ``confidence_log`` overrides the checkpoint log, e.g. with one row per epoch.
    """
    C = trajectory.confidence_log if confidence_log is None else np.asarray(confidence_log)
    if C.shape[0] == 0:
        raise ValueError("no confidence log")
    return ScoreVector(trajectory.ids, C.mean(axis=0), "c_proxy", False)


def el2n_scores(spec: ModelSpec, params, dataset: Dataset) -> np.ndarray:
    P = mk.forward(spec, params, dataset.features)
    P[np.arange(len(dataset)), dataset.labels] -= 1.0
    return np.sqrt(np.einsum("ij,ij->i", P, P))


def proxy_el2n(spec: ModelSpec, mid_checkpoint_params, dataset: Dataset) -> ScoreVector:
    return ScoreVector(dataset.ids, el2n_scores(spec, mid_checkpoint_params, dataset), "el2n", True)


def mid_checkpoint(trajectory: Trajectory) -> np.ndarray:
    return trajectory.checkpoints[trajectory.n_checkpoints // 2]


def _split(scores: ScoreVector, positions, label: str) -> ForgetSplit:
    mask = np.zeros(len(scores), dtype=bool)
    mask[positions] = True
    forget = np.sort(scores.ids[mask])
    retain = np.sort(scores.ids[~mask])
    mean = float(scores.scores[mask].mean()) if mask.any() else float("nan")
    return ForgetSplit(forget, retain, label, mean, scores.metric)


def stratified_windows(n: int, set_size: int) -> list[tuple[int, int]]:
    """Half-open index windows: first s, centred on Q1/Q2/Q3, last s."""
    s = set_size
    if s <= 0 or s % 2:
        raise ValueError("set_size must be a positive even integer")
    if 5 * s > n:
        raise ValueError(f"5 * set_size = {5 * s} exceeds n = {n}")
    h = s // 2
    windows = [(0, s)]
    for c in (n // 4, n // 2, (3 * n) // 4):
        windows.append((c - h, c + h))
    windows.append((n - s, n))
    for (a0, a1), (b0, b1) in zip(windows, windows[1:]):
        if b0 < a1:
            raise ValueError(f"forget windows [{a0},{a1}) and [{b0},{b1}) overlap; n={n} too small for s={s}")
    return windows


def stratified_forget_sets(scores: ScoreVector, set_size: int) -> list[ForgetSplit]:
    order = scores.difficulty_order()
    return [
        _split(scores, order[a:b], label)
        for (a, b), label in zip(stratified_windows(len(scores), set_size), SPLIT_LABELS)
    ]


def top_k_forget_set(scores: ScoreVector, k: int) -> ForgetSplit:
    if not 0 <= k <= len(scores):
        raise ValueError(f"k={k} out of range for {len(scores)} examples")
    # Hardest k under the metric's orientation; among equal scores the lower id is "harder".
    key = -scores.scores if scores.higher_is_harder else scores.scores
    order = np.lexsort((scores.ids, key))
    return _split(scores, order[:k], f"top-{k}:{scores.metric}")


def _as_arrays(x, y):
    if isinstance(x, ScoreVector) and isinstance(y, ScoreVector):
        return x.aligned(y)
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def spearman(x, y) -> float:
    """Pearson correlation of tie-averaged ranks."""
    a, b = _as_arrays(x, y)
    if a.size != b.size or a.size < 2:
        raise ValueError("need two equally sized samples of length >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if denom == 0:
        raise ValueError("correlation undefined: zero rank variance")
    return float(np.clip(np.dot(ra, rb) / denom, -1.0, 1.0))


def bin_means(x, y, n_bins: int = 30) -> list[tuple[float, float]]:
    """Equal-count bins along x; returns (mean x, mean y) per bin."""
    a, b = _as_arrays(x, y)
    order = np.argsort(a, kind="stable")
    return [(float(a[c].mean()), float(b[c].mean())) for c in np.array_split(order, n_bins) if c.size]
