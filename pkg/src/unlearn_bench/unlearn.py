"""Fine-tuning and L1-sparse unlearning on the retain set, plus oracle retraining."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as mk
from .model import Dataset, ModelSpec
from .trainer import TrainConfig, TrainingDiverged, sgld_step, train

METHODS = ("finetune", "l1sparse")

Evaluator = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "finetune"
    lr: float = 0.01
    l1_coeff: float = 0.0
    epochs: int = 25
    batch_size: int = 64
    eval_every: int = 10
    seed: int = 0
    weight_decay: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown unlearning method {self.method!r}")
        if self.lr < 0 or self.l1_coeff < 0 or self.noise_sigma < 0 or self.weight_decay < 0:
            raise ValueError("lr, l1_coeff, noise_sigma and weight_decay must be non-negative")
        if self.method == "finetune" and self.l1_coeff != 0:
            raise ValueError("finetune takes no L1 term; use method='l1sparse'")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")

    def total_steps(self, n_retain: int) -> int:
        return self.epochs * math.ceil(n_retain / self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UnlearnRun:
    steps: np.ndarray
    metrics: dict[str, np.ndarray]
    final_params: np.ndarray
    config: UnlearnConfig
    split: dict = field(default_factory=dict)

    def series(self, name: str) -> np.ndarray:
        if name not in self.metrics:
            raise KeyError(f"metric {name!r} not tracked; have {sorted(self.metrics)}")
        return self.metrics[name]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "metric", "value"])
            for name in sorted(self.metrics):
                for s, v in zip(self.steps, self.metrics[name]):
                    w.writerow([int(s), name, repr(float(v))])

    def write(self, csv_path, sidecar_path) -> None:
        self.to_csv(csv_path)
        with open(sidecar_path, "w") as f:
            json.dump({"config": self.config.to_dict(), "split": self.split}, f, indent=2)

    @classmethod
    def read(cls, csv_path, sidecar_path, final_params=None) -> "UnlearnRun":
        rows: dict[str, dict[int, float]] = {}
        with open(csv_path, newline="") as f:
            for row in csv.DictReader(f):
                rows.setdefault(row["metric"], {})[int(row["step"])] = float(row["value"])
        steps = np.array(sorted({s for d in rows.values() for s in d}), dtype=np.int64)
        metrics = {k: np.array([d[int(s)] for s in steps]) for k, d in rows.items()}
        with open(sidecar_path) as f:
            side = json.load(f)
        return cls(steps, metrics, final_params, UnlearnConfig(**side["config"]), side.get("split", {}))


def soft_threshold(v: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def l1_sparse_step(params, mean_grad, lr: float, l1_coeff: float, weight_decay: float = 0.0,
                   sigma: float = 0.0, rng=None) -> np.ndarray:
    """Gradient step followed by the L1 proximal map, soft(v, lr * l1_coeff)."""
    v = sgld_step(params, mean_grad, lr, sigma, weight_decay, rng)
    tau = lr * l1_coeff
    return soft_threshold(v, tau) if tau > 0 else v


def finetune_unlearn(
    spec: ModelSpec,
    start_params,
    retain: Dataset,
    config: UnlearnConfig,
    evaluators: Mapping[str, Evaluator] | None = None,
    *,
    audit: set | None = None,
    split: dict | None = None,
) -> UnlearnRun:
    """Minibatch descent on the retain set only, evaluating metrics every ``eval_every`` steps.

    Evaluations happen at step 0, at each multiple of ``eval_every`` and at the final step.
    """
    if len(retain) == 0:
        raise ValueError("retain set is empty")
    evaluators = dict(evaluators or {})
    n = len(retain)
    bs = min(config.batch_size, n)
    spe = math.ceil(n / bs)
    total = config.epochs * spe
    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    X, y = retain.features, retain.labels
    params = np.array(start_params, dtype=np.float64)

    steps: list[int] = []
    values: dict[str, list[float]] = {k: [] for k in evaluators}

    def record(step):
        steps.append(step)
        for name, fn in evaluators.items():
            v = float(fn(params))
            if not math.isfinite(v):
                raise TrainingDiverged(f"metric {name} is non-finite at unlearning step {step}")
            values[name].append(v)

    record(0)
    step = 0
    for _ in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        for b in range(spe):
            idx = perm[b * bs : (b + 1) * bs]
            if audit is not None:
                audit.update(retain.ids[idx].tolist())
            try:
                g = mk.grad_params(spec, params, X[idx], y[idx])
            except mk.NonFiniteError as exc:
                raise TrainingDiverged(f"unlearning diverged at step {step}: {exc}") from None
            if config.method == "l1sparse":
                params = l1_sparse_step(params, g, config.lr, config.l1_coeff, config.weight_decay,
                                        config.noise_sigma, noise_rng)
            else:
                params = sgld_step(params, g, config.lr, config.noise_sigma, config.weight_decay, noise_rng)
            step += 1
            if step % config.eval_every == 0 or step == total:
                record(step)
    if not np.all(np.isfinite(params)):
        raise TrainingDiverged("unlearning produced non-finite parameters")
    return UnlearnRun(
        np.array(steps, dtype=np.int64),
        {k: np.array(v) for k, v in values.items()},
        params,
        config,
        dict(split or {}),
    )


def train_oracle(spec: ModelSpec, retain: Dataset, config: TrainConfig, seed: int | None = None,
                 audit: set | None = None) -> np.ndarray:
    """Train from a fresh initialisation on the retain set only; returns final parameters."""
    if len(retain) == 0:
        raise ValueError("retain set is empty")
    cfg = config if seed is None else replace(config, seed=seed)
    cfg = replace(cfg, checkpoint_count=1)
    return train(spec, retain, cfg, log_checkpoints=False, audit=audit).final_params


def time_to_unlearn(run: UnlearnRun, metric: str, oracle_value: float, margin: float = 0.05):
    """First evaluated step whose metric is within ``margin`` (absolute) of the oracle, else None."""
    series = run.series(metric)
    hit = np.flatnonzero(np.abs(series - oracle_value) <= margin + 1e-12)
    return int(run.steps[hit[0]]) if hit.size else None


def grid_search_hparams(
    lrs: Sequence[float],
    l1_coeffs: Sequence[float],
    pilot: Callable[[UnlearnConfig], UnlearnRun],
    base: UnlearnConfig,
    metric: str,
    oracle_value: float,
    budget: int | None = None,
    margin: float = 0.05,
) -> UnlearnConfig:
    """Select the fastest configuration that reaches the margin on a pilot split.

    ``budget`` caps the pilot runs in epochs. When no candidate reaches the margin the
    one with the smallest final error wins. Ties go to the smaller learning rate.
    """
    if not lrs or (base.method == "l1sparse" and not l1_coeffs):
        raise ValueError("empty hyperparameter grid")
    coeffs = list(l1_coeffs) if base.method == "l1sparse" else [0.0]
    results = []
    for lr in lrs:
        for c in coeffs:
            cfg = replace(base, lr=float(lr), l1_coeff=float(c))
            if budget is not None:
                cfg = replace(cfg, epochs=int(budget))
            run = pilot(cfg)
            t = time_to_unlearn(run, metric, oracle_value, margin)
            final_err = abs(float(run.series(metric)[-1]) - oracle_value)
            results.append((cfg, t, final_err))
    qualifying = [r for r in results if r[1] is not None]
    if qualifying:
        best = min(qualifying, key=lambda r: (r[1], r[0].lr, r[0].l1_coeff))
    else:
        best = min(results, key=lambda r: (r[2], r[0].lr, r[0].l1_coeff))
    chosen = best[0]
    return replace(chosen, epochs=base.epochs) if budget is not None else chosen
