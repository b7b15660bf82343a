"""Minibatch SGD / SGLD with milestone decay and evenly spaced checkpoint logging."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as mk
from .model import Dataset, ModelSpec

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    lr0: float = 0.01
    milestones: tuple[int, ...] = (80, 120)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    noise_sigma: float = 0.0
    checkpoint_count: int = 35
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 0 or m >= self.epochs for m in ms):
            raise ValueError(f"milestones {ms} must be strictly increasing and < epochs")
        if self.weight_decay < 0 or self.noise_sigma < 0:
            raise ValueError("weight_decay and noise_sigma must be non-negative")
        if self.checkpoint_count < 1:
            raise ValueError("checkpoint_count must be >= 1")

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def total_steps(self, n: int) -> int:
        return self.epochs * self.steps_per_epoch(n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Trajectory:
    checkpoint_steps: np.ndarray
    checkpoints: list[np.ndarray]
    grad_norm_log: np.ndarray  # N x n
    confidence_log: np.ndarray  # N x n
    final_params: np.ndarray
    total_steps: int
    ids: np.ndarray
    initial_params: np.ndarray | None = None
    loss_log: np.ndarray | None = None  # mean training cross-entropy per checkpoint
    batch_size: int = 64
    extra: dict = field(default_factory=dict)

    @property
    def n_checkpoints(self) -> int:
        return len(self.checkpoint_steps)

    def sampling_probability(self) -> float:
        return min(1.0, self.batch_size / len(self.ids))


def lr_at(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr0 * config.decay_factor**passed


def checkpoint_schedule(total_steps: int, count: int) -> np.ndarray:
    """s_i = round(i * T / N) for i = 1..N, rounding halves up."""
    if count > total_steps:
        raise ValueError(f"checkpoint_count {count} exceeds total steps {total_steps}")
    i = np.arange(1, count + 1)
    return np.floor(i * total_steps / count + 0.5).astype(np.int64)


def sgld_step(params, mean_grad, lr: float, sigma: float, weight_decay: float, rng=None) -> np.ndarray:
    """w - lr * (grad + wd * w + xi) with xi ~ N(0, sigma^2 I); sigma = 0 is plain SGD."""
    direction = mean_grad + weight_decay * params if weight_decay else mean_grad
    if sigma > 0:
        direction = direction + sigma * rng.standard_normal(params.shape[0])
    return params - lr * direction


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    shuffle_ss, noise_ss = ss.spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(noise_ss)


def train(
    spec: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    *,
    init: np.ndarray | None = None,
    log_checkpoints: bool = True,
    audit: set | None = None,
) -> Trajectory:
    """Run the training schedule and log every checkpoint over the full dataset.

    ``audit``, when given, collects the id of every example drawn into a minibatch.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    dataset.check_classes(spec.n_classes)
    X, y = dataset.features, dataset.labels
    spe = config.steps_per_epoch(n)
    T = config.epochs * spe
    ckpt_steps = checkpoint_schedule(T, config.checkpoint_count)
    ckpt_set = {int(s): j for j, s in enumerate(ckpt_steps)}

    params = mk.init_params(spec, config.seed) if init is None else np.array(init, dtype=np.float64)
    initial = params.copy()
    shuffle_rng, noise_rng = _streams(config.seed)

    N = len(ckpt_steps)
    checkpoints: list[np.ndarray] = []
    gn_log = np.zeros((N, n)) if log_checkpoints else np.zeros((0, n))
    conf_log = np.zeros((N, n)) if log_checkpoints else np.zeros((0, n))
    loss_log = np.zeros(N)

    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        perm = shuffle_rng.permutation(n)
        for b in range(spe):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            if audit is not None:
                audit.update(dataset.ids[idx].tolist())
            try:
                g = mk.grad_params(spec, params, X[idx], y[idx])
            except mk.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite gradient at step {step} (epoch {epoch}): {exc}") from None
            params = sgld_step(params, g, lr, config.noise_sigma, config.weight_decay, noise_rng)
            step += 1
            j = ckpt_set.get(step)
            if j is not None:
                checkpoints.append(params.copy())
                losses = mk.per_example_loss(spec, params, X, y)
                loss_log[j] = losses.mean()
                if not np.isfinite(loss_log[j]):
                    raise TrainingDiverged(f"non-finite training loss at step {step} (epoch {epoch})")
                if log_checkpoints:
                    gn_log[j] = mk.per_example_grad_norms(spec, params, X, y)
                    conf_log[j] = mk.confidences(spec, params, X, y)
        if not np.all(np.isfinite(params)):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")

    log.debug("trained %d steps, final loss %.4f", T, loss_log[-1])
    return Trajectory(
        checkpoint_steps=ckpt_steps,
        checkpoints=checkpoints,
        grad_norm_log=gn_log,
        confidence_log=conf_log,
        final_params=params,
        total_steps=T,
        ids=dataset.ids.copy(),
        initial_params=initial,
        loss_log=loss_log,
        batch_size=config.batch_size,
    )
