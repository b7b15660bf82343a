"""Linear-path loss barriers and weight-matching permutation alignment."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import model as mk
from .model import Dataset, ModelSpec


@dataclass
class BarrierProfile:
    alphas: np.ndarray
    values: np.ndarray  # loss (or error) at alpha * w + (1 - alpha) * w'
    endpoint_w: float
    endpoint_w_prime: float
    barrier: float
    aligned: bool = False
    metric: str = "loss"

    @property
    def deviations(self) -> np.ndarray:
        a = self.alphas
        # Written as an offset from w' so identical endpoints give an exactly flat chord.
        return self.values - (self.endpoint_w_prime + a * (self.endpoint_w - self.endpoint_w_prime))

    def write(self, csv_path, sidecar_path) -> None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["alpha", self.metric])
            for a, v in zip(self.alphas, self.values):
                w.writerow([repr(float(a)), repr(float(v))])
        with open(sidecar_path, "w") as f:
            json.dump({"barrier": self.barrier, "aligned": self.aligned,
                       "grid_n": len(self.alphas) - 1, "metric": self.metric}, f, indent=2)


def _path_value(spec, params, dataset, metric):
    if metric == "loss":
        return mk.loss(spec, params, dataset.features, dataset.labels)
    if metric == "error":
        return mk.error_rate(spec, params, dataset.features, dataset.labels)
    raise ValueError(f"unknown barrier metric {metric!r}")


def barrier(spec: ModelSpec, w, w_prime, dataset: Dataset, grid_n: int = 24,
            metric: str = "loss", aligned: bool = False) -> BarrierProfile:
    """max over alpha of L(alpha w + (1-alpha) w') - alpha L(w) - (1-alpha) L(w') on a uniform grid."""
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    w = np.asarray(w, dtype=np.float64)
    w_prime = np.asarray(w_prime, dtype=np.float64)
    alphas = np.linspace(0.0, 1.0, grid_n + 1)
    values = np.empty(alphas.size)
    for i, a in enumerate(alphas):
        # Endpoints use the exact parameter vectors so their deviation is exactly zero.
        mix = w if a == 1.0 else w_prime if a == 0.0 else w_prime + a * (w - w_prime)
        values[i] = _path_value(spec, mix, dataset, metric)
    prof = BarrierProfile(alphas, values, float(values[-1]), float(values[0]), 0.0, aligned, metric)
    prof.barrier = float(max(0.0, prof.deviations.max()))
    return prof


def solve_assignment(cost, maximize: bool = False) -> np.ndarray:
    """Optimal square assignment by shortest augmenting paths with potentials, O(k^3).

    Returns ``perm`` with row i assigned to column ``perm[i]``. Scans columns in
    ascending order with strict comparisons, so equal inputs give equal outputs.
    """
    C = np.array(cost, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    if maximize:
        C = -C
    k = C.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    # 1-based potentials/matching; column 0 is the virtual start.
    u = np.zeros(k + 1)
    v = np.zeros(k + 1)
    match = np.zeros(k + 1, dtype=np.int64)  # match[j] = row (1-based) owning column j
    way = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, k + 1):
        match[0] = i
        j0 = 0
        minv = np.full(k + 1, np.inf)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(k, dtype=np.int64)
    perm[match[1:] - 1] = np.arange(k)
    return perm


@dataclass
class LayerPermutation:
    perms: list[np.ndarray]

    def __post_init__(self):
        for p in self.perms:
            if not np.array_equal(np.sort(p), np.arange(p.size)):
                raise ValueError("layer permutation is not a bijection")

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(p.size)) for p in self.perms)


def apply_permutation(spec: ModelSpec, params, perm: LayerPermutation) -> np.ndarray:
    """Reorder hidden units: new unit i of layer l is old unit perm[l][i]."""
    layers = [(W.copy(), b.copy()) for W, b in mk.unflatten(spec, params)]
    for l, p in enumerate(perm.perms):
        W, b = layers[l]
        layers[l] = (W[p], b[p])
        Wn, bn = layers[l + 1]
        layers[l + 1] = (Wn[:, p], bn)
    return mk.flatten(spec, layers)


def matching_objective(spec: ModelSpec, w_ref, w) -> float:
    """Sum of layerwise Frobenius inner products (weights and biases)."""
    return float(np.dot(np.asarray(w_ref), np.asarray(w)))


def _unit_similarity(ref_layers, layers, l, perms):
    """S[i, j]: similarity of ref unit i with unit j of layer l, other layers held fixed."""
    Wr, br = ref_layers[l]
    W, b = layers[l]
    if l > 0:
        W = W[:, perms[l - 1]]
    S = Wr @ W.T + np.outer(br, b)
    Wr_next = ref_layers[l + 1][0]
    W_next = layers[l + 1][0]
    if l + 1 < len(perms):
        W_next = W_next[perms[l + 1]]
    return S + Wr_next.T @ W_next


def align_permutations(spec: ModelSpec, w_ref, w, max_passes: int = 100, return_history: bool = False):
    """Weight matching of ``w`` onto ``w_ref`` by coordinate descent over hidden layers.

    Each layer's permutation maximises the inner product of its incoming weights,
    bias and outgoing weights with the reference, holding the others fixed; passes
    repeat until no permutation changes. The result computes the same function as w.
    """
    hidden = spec.hidden_widths
    perms = [np.arange(h) for h in hidden]
    history = [matching_objective(spec, w_ref, w)]
    if not hidden:
        out = (np.array(w, dtype=np.float64), LayerPermutation(perms))
        return (*out, history) if return_history else out
    ref_layers = mk.unflatten(spec, w_ref)
    layers = mk.unflatten(spec, w)
    for _ in range(max_passes):
        changed = False
        for l in range(len(hidden)):
            S = _unit_similarity(ref_layers, layers, l, perms)
            new = solve_assignment(S, maximize=True)
            current = S[np.arange(S.shape[0]), perms[l]].sum()
            # Keep the current permutation unless the new one is strictly better.
            if S[np.arange(S.shape[0]), new].sum() > current + 1e-12 * max(1.0, abs(current)):
                if not np.array_equal(new, perms[l]):
                    perms[l] = new
                    changed = True
        history.append(matching_objective(spec, w_ref, apply_permutation(spec, w, LayerPermutation(perms))))
        if not changed:
            break
    lp = LayerPermutation(perms)
    aligned = apply_permutation(spec, w, lp)
    return (aligned, lp, history) if return_history else (aligned, lp)


def aligned_barrier(spec: ModelSpec, w_ref, w, dataset: Dataset, grid_n: int = 24,
                    metric: str = "loss") -> BarrierProfile:
    """Barrier after permuting ``w`` onto ``w_ref``."""
    w_aligned, _ = align_permutations(spec, w_ref, w)
    return barrier(spec, w_aligned, w_ref, dataset, grid_n, metric, aligned=True)
