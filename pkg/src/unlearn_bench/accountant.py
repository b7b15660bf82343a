"""Per-instance Renyi privacy losses from gradient norms, group estimates, and bound formulas.

Everything that sums exponentials works in the log domain: with sigma = 1e-3
and gradient norms of order 10 the exponents reach 1e8 and beyond.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import model as mk
from .model import Dataset, ModelSpec
from .trainer import Trajectory


class InfeasibleBound(ValueError):
    """delta does not exceed the irreducible stationarity term."""


@dataclass(frozen=True)
class AccountantConfig:
    alpha: float
    sigma: float
    q: float
    total_steps: int
    p: float | None = None  # defaults to 3 * total_steps

    def __post_init__(self):
        if self.p is None:
            object.__setattr__(self, "p", float(3 * self.total_steps))
        if not self.alpha > 1:
            raise ValueError("alpha must exceed 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if self.p < 2:
            raise ValueError("p must be at least 2")

    @classmethod
    def for_trajectory(cls, traj: Trajectory, alpha: float, sigma: float, p: float | None = None):
        return cls(alpha=alpha, sigma=sigma, q=traj.sampling_probability(), total_steps=traj.total_steps, p=p)


def op_alpha(p: float, alpha: float) -> float:
    return p / (p - 1) * alpha - 1 / p


def op_iter(p: float, alpha: float, t: int) -> float:
    """``op_alpha`` composed t times, by direct iteration."""
    r = p / (p - 1)
    c = 1 / p
    x = float(alpha)
    for _ in range(int(t)):
        x = r * x - c
    return x


def op_iter_closed(p: float, alpha: float, t: int) -> float:
    """Closed form r^t * alpha - (p-1)/p * (r^t - 1) with r = p/(p-1)."""
    growth = math.expm1(t * math.log1p(1 / (p - 1)))  # r^t - 1
    return alpha + growth * alpha - (p - 1) / p * growth


def op_iter_series(p: float, alpha: float, steps) -> np.ndarray:
    """op_iter at each of the increasing steps, with a single pass of iteration."""
    steps = np.asarray(steps, dtype=np.int64)
    if np.any(np.diff(steps) < 0) or (steps.size and steps[0] < 0):
        raise ValueError("steps must be non-negative and non-decreasing")
    r = p / (p - 1)
    c = 1 / p
    out = np.empty(steps.size)
    x = float(alpha)
    t = 0
    for i, s in enumerate(steps):
        while t < s:
            x = r * x - c
            t += 1
        out[i] = x
    return out


def coeff_C(t: int, alpha: float, p: float) -> float:
    """(1/(alpha-1)) * ((p-1)/p)^(t+1), evaluated through its logarithm."""
    return math.exp((t + 1) * math.log1p(-1 / p)) / (alpha - 1)


def _binomial_log_weights(m: int, q: float) -> np.ndarray:
    k = np.arange(m + 1, dtype=np.float64)
    log_binom = gammaln(m + 1) - gammaln(k + 1) - gammaln(m - k + 1)
    with np.errstate(divide="ignore"):
        log_q = math.log(q)
        log_1mq = math.log1p(-q) if q < 1 else -np.inf
    tail = np.zeros(m + 1)
    tail[:-1] = (m - k[:-1]) * log_1mq  # leave k = m at 0 to avoid 0 * -inf
    return log_binom + k * log_q + tail


def ln_f_order(op_value: float) -> int:
    # Round the composed order up; exact integers stay put despite iteration noise.
    nearest = round(op_value)
    if abs(op_value - nearest) <= 1e-9 * max(1.0, abs(op_value)):
        return int(nearest)
    return int(math.ceil(op_value))


def ln_f_vec(m: int, g, sigma: float, q: float, p: float) -> np.ndarray:
    """ln f evaluated for an array of gradient norms at binomial order m."""
    g = np.asarray(g, dtype=np.float64)
    out = np.zeros(g.shape)
    if m <= 1:
        return out
    lw = _binomial_log_weights(m, q)
    k = np.arange(m + 1, dtype=np.float64)
    scale = (k * k - k) / (2.0 * sigma * sigma)
    nz = g > 0
    if np.any(nz):
        gsq = g[nz] ** 2
        terms = lw[None, :] + gsq[:, None] * scale[None, :]
        out[nz] = np.maximum(p * logsumexp(terms, axis=1), 0.0)
    return out


def ln_f(t: int, alpha: float, g: float, config: AccountantConfig) -> float:
    """p * ln sum_k Binom(m, k) q^k (1-q)^(m-k) exp(g^2 (k^2-k) / (2 sigma^2)), m = ceil(o^t(alpha))."""
    if g < 0:
        raise ValueError("gradient norm must be non-negative")
    m = ln_f_order(op_iter(config.p, alpha, t))
    return float(ln_f_vec(m, np.array([g]), config.sigma, config.q, config.p)[0])


def per_step_losses(grad_norm_log, checkpoint_steps, config: AccountantConfig) -> np.ndarray:
    """C_{s_i} * ln f_{s_i}(g) for every checkpoint row and example column."""
    G = np.atleast_2d(np.asarray(grad_norm_log, dtype=np.float64))
    steps = np.asarray(checkpoint_steps, dtype=np.int64)
    if G.shape[0] != steps.size:
        raise ValueError(f"{G.shape[0]} gradient-norm rows for {steps.size} checkpoints")
    if np.any(G < 0) or not np.all(np.isfinite(G)):
        raise ValueError("gradient norms must be finite and non-negative")
    orders = op_iter_series(config.p, config.alpha, steps)
    out = np.empty(G.shape)
    for i, (s, o) in enumerate(zip(steps, orders)):
        m = ln_f_order(o)
        out[i] = coeff_C(int(s), config.alpha, config.p) * ln_f_vec(m, G[i], config.sigma, config.q, config.p)
    return out


def _step_widths(steps: np.ndarray) -> np.ndarray:
    if np.any(np.diff(steps) <= 0) or (steps.size and steps[0] <= 0):
        raise ValueError("checkpoint steps must be positive and strictly increasing")
    return np.diff(np.concatenate([[0], steps])).astype(np.float64)


def per_instance_loss(grad_norm_series, checkpoint_steps, config: AccountantConfig) -> float:
    """Right-hand-rule sum of per-checkpoint losses for one example."""
    series = np.asarray(grad_norm_series, dtype=np.float64).reshape(-1)
    steps = np.asarray(checkpoint_steps, dtype=np.int64).reshape(-1)
    if series.size != steps.size:
        raise ValueError(f"series length {series.size} != checkpoint count {steps.size}")
    per_step = per_step_losses(series[:, None], steps, config)[:, 0]
    return float(np.dot(per_step, _step_widths(steps)))


def per_instance_losses(grad_norm_log, checkpoint_steps, config: AccountantConfig) -> np.ndarray:
    """Vectorised ``per_instance_loss`` for every column of an N x n log."""
    steps = np.asarray(checkpoint_steps, dtype=np.int64)
    per_step = per_step_losses(grad_norm_log, steps, config)
    return _step_widths(steps) @ per_step


@dataclass
class PrivacyLossTable:
    ids: np.ndarray
    losses: np.ndarray
    config: AccountantConfig
    checkpoint_steps: np.ndarray

    def to_csv(self, path) -> None:
        c = self.config
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "loss", "alpha", "sigma", "p", "T"])
            for i, v in zip(self.ids, self.losses):
                w.writerow([int(i), repr(float(v)), c.alpha, c.sigma, c.p, c.total_steps])

    @classmethod
    def from_csv(cls, path, checkpoint_steps=None) -> "PrivacyLossTable":
        ids, losses, cfg = [], [], None
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                ids.append(int(row["id"]))
                losses.append(float(row["loss"]))
                if cfg is None:
                    cfg = (float(row["alpha"]), float(row["sigma"]), float(row["p"]), int(row["T"]))
        alpha, sigma, p, T = cfg
        # q is not part of the table format; 1.0 is a placeholder that passes validation.
        config = AccountantConfig(alpha=alpha, sigma=sigma, q=1.0, total_steps=T, p=p)
        steps = np.asarray(checkpoint_steps if checkpoint_steps is not None else [], dtype=np.int64)
        return cls(np.array(ids), np.array(losses), config, steps)


def privacy_loss_table(traj: Trajectory, config: AccountantConfig) -> PrivacyLossTable:
    losses = per_instance_losses(traj.grad_norm_log, traj.checkpoint_steps, config)
    return PrivacyLossTable(traj.ids.copy(), losses, config, traj.checkpoint_steps.copy())


def group_delta(sampled_batch_grads, retain_batch_grad, alpha_int: int) -> float:
    """sum_i |U_i|^2 - (a-1)|V|^2 - |sum_i U_i - (a-1) V|^2 for a list of a batch gradients."""
    U = np.atleast_2d(np.asarray(sampled_batch_grads, dtype=np.float64))
    V = np.asarray(retain_batch_grad, dtype=np.float64).reshape(-1)
    if U.shape[0] != alpha_int or alpha_int < 1:
        raise ValueError(f"expected {alpha_int} sampled batch gradients, got {U.shape[0]}")
    if U.shape[1] != V.size:
        raise ValueError("batch gradient dimensions disagree")
    a1 = alpha_int - 1
    resid = U.sum(axis=0) - a1 * V
    return float(np.sum(U * U) - a1 * np.dot(V, V) - np.dot(resid, resid))


def _batch_grads(spec, params, data: Dataset, rng, count: int, batch_size: int) -> np.ndarray:
    n = len(data)
    bs = min(batch_size, n)
    out = np.empty((count, spec.dim))
    for j in range(count):
        idx = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
        out[j] = mk.grad_params(spec, params, data.features[idx], data.labels[idx])
    return out


def group_ln_G(
    spec: ModelSpec,
    params,
    full: Dataset,
    retain: Dataset,
    order: int,
    sigma: float,
    p: float,
    batch_size: int,
    n_outer: int,
    n_inner: int,
    rng,
) -> float:
    """Monte-Carlo ln G at one checkpoint: p * mean_outer ln mean_inner exp(-Delta / 2 sigma^2)."""
    outer = np.empty(n_outer)
    for o in range(n_outer):
        V = _batch_grads(spec, params, retain, rng, 1, batch_size)[0]
        expo = np.empty(n_inner)
        for j in range(n_inner):
            U = _batch_grads(spec, params, full, rng, order, batch_size)
            expo[j] = -group_delta(U, V, order) / (2.0 * sigma * sigma)
        outer[o] = logsumexp(expo) - math.log(n_inner)
    return float(p * outer.mean())


def group_loss_estimate(
    trajectory: Trajectory,
    spec: ModelSpec,
    full_dataset: Dataset,
    retain_dataset: Dataset,
    config: AccountantConfig,
    n_outer: int = 1,
    n_inner: int = 4,
    seed: int = 0,
    n_repeats: int = 20,
    batch_size: int | None = None,
) -> tuple[float, float]:
    """Mean and standard deviation over repeated Monte-Carlo group-privacy estimates.

    Per checkpoint s_i the order is ceil(o^{s_i}(alpha)), so that many minibatches
    are drawn from the full data against one from the retain data; per-step terms
    are weighted by C_{s_i} and summed with the right-hand rule.
    """
    if len(retain_dataset) == 0:
        raise ValueError("retain set is empty")
    if trajectory.n_checkpoints == 0:
        raise ValueError("trajectory has no checkpoints")
    bs = batch_size or trajectory.batch_size
    steps = np.asarray(trajectory.checkpoint_steps, dtype=np.int64)
    widths = _step_widths(steps)
    orders = [ln_f_order(o) for o in op_iter_series(config.p, config.alpha, steps)]
    weights = np.array([coeff_C(int(s), config.alpha, config.p) for s in steps]) * widths
    children = np.random.SeedSequence(seed).spawn(n_repeats)
    totals = np.empty(n_repeats)
    for r, child in enumerate(children):
        rng = np.random.default_rng(child)
        per_step = np.array([
            group_ln_G(spec, w, full_dataset, retain_dataset, m, config.sigma, config.p, bs, n_outer, n_inner, rng)
            for w, m in zip(trajectory.checkpoints, orders)
        ])
        totals[r] = float(weights @ per_step)
    return float(totals.mean()), float(totals.std(ddof=1) if n_repeats > 1 else 0.0)


@dataclass(frozen=True)
class BoundInputs:
    eps_prime_4a: float
    eps_4am1: float
    eps_2am1: float
    contraction_C: float
    alpha: float
    k: float

    def __post_init__(self):
        vals = (self.eps_prime_4a, self.eps_4am1, self.eps_2am1, self.k)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("bound inputs must be finite and non-negative")
        if not self.contraction_C > 0:
            raise ValueError("contraction constant C must be positive")
        if not self.alpha > 1:
            raise ValueError("alpha must exceed 1")


def bound_bracket(inputs: BoundInputs) -> float:
    a = inputs.alpha
    return (2 * a - 0.5) / (2 * a - 2) * inputs.eps_prime_4a + (2 * a - 1) / (2 * a - 2) * inputs.eps_4am1


def eval_unlearning_bound(inputs: BoundInputs) -> float:
    """Renyi unlearning level after k noisy fine-tuning steps."""
    decay = math.exp(-inputs.contraction_C * inputs.k / (2 * inputs.alpha))
    return bound_bracket(inputs) * decay + inputs.eps_2am1


def min_steps_bound(delta, A_alpha, B_alpha, C_alpha, privacy_loss_4a, eps_4am1, eps_2am1) -> float:
    """A * ln((B * P + C * eps_{4a-1}) / (delta - eps_{2a-1})); may be -inf or negative."""
    if not delta > eps_2am1:
        raise InfeasibleBound(f"delta={delta} must exceed eps_(2a-1)={eps_2am1}")
    num = B_alpha * privacy_loss_4a + C_alpha * eps_4am1
    if num <= 0:
        return -math.inf
    return A_alpha * math.log(num / (delta - eps_2am1))
