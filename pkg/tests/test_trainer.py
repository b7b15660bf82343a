import numpy as np
import pytest

from unlearn_bench import model as mk
from unlearn_bench.data import SynthSpec, synth_gaussians
from unlearn_bench.model import ModelSpec
from unlearn_bench.trainer import (TrainConfig, TrainingDiverged, checkpoint_schedule, lr_at, sgld_step,
                                   train)


def small():
    d = synth_gaussians(SynthSpec(3, 40, 4, 0.4, 0))
    return ModelSpec((4, 6, 3)), d


def test_lr_schedule():
    c = TrainConfig(epochs=150, lr0=0.01, milestones=(80, 120))
    assert lr_at(c, 0) == 0.01
    assert lr_at(c, 80) == pytest.approx(0.001)
    assert lr_at(c, 120) == pytest.approx(0.0001)
    assert lr_at(TrainConfig(epochs=5, milestones=()), 4) == TrainConfig().lr0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, milestones=(5, 3))
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, milestones=(10,))
    with pytest.raises(ValueError):
        TrainConfig(noise_sigma=-1)


def test_sgld_step_cases(rng):
    w = rng.standard_normal(5)
    g = rng.standard_normal(5)
    assert np.array_equal(sgld_step(w, g, 0.1, 0.0, 0.0), w - 0.1 * g)
    assert np.allclose(sgld_step(w, np.zeros(5), 0.1, 0.0, 0.5), w * (1 - 0.05))
    a = sgld_step(w, g, 0.1, 0.3, 0.0, np.random.default_rng(3))
    b = sgld_step(w, g, 0.1, 0.3, 0.0, np.random.default_rng(3))
    assert np.array_equal(a, b) and not np.array_equal(a, w - 0.1 * g)


def test_checkpoint_schedule():
    assert checkpoint_schedule(10, 1).tolist() == [10]
    assert checkpoint_schedule(10, 4).tolist() == [3, 5, 8, 10]  # 2.5 -> 3, 7.5 -> 8
    with pytest.raises(ValueError):
        checkpoint_schedule(3, 4)


def test_step_arithmetic():
    spec, d = small()
    d = d.take(np.arange(10))
    traj = train(spec, d, TrainConfig(epochs=2, batch_size=5, lr0=0.1, milestones=(), checkpoint_count=1))
    assert traj.total_steps == 4
    assert traj.checkpoint_steps.tolist() == [4]
    assert np.array_equal(traj.checkpoints[0], traj.final_params)


def test_determinism_and_logs():
    spec, d = small()
    cfg = TrainConfig(epochs=5, batch_size=16, lr0=0.3, milestones=(3,), checkpoint_count=5, seed=2)
    a, b = train(spec, d, cfg), train(spec, d, cfg)
    assert np.array_equal(a.final_params, b.final_params)
    assert np.array_equal(a.grad_norm_log, b.grad_norm_log)
    assert a.grad_norm_log.shape == (5, len(d))
    assert np.all(a.grad_norm_log >= 0) and np.all(np.isfinite(a.grad_norm_log))
    assert a.loss_log[-1] <= a.loss_log[0]
    # the logged norms are full-dataset norms at the checkpoints
    j = 2
    assert np.allclose(a.grad_norm_log[j], mk.per_example_grad_norms(spec, a.checkpoints[j], d.features, d.labels))
    assert np.allclose(a.confidence_log[j], mk.confidences(spec, a.checkpoints[j], d.features, d.labels))


def test_sgld_tiny_sigma_matches_sgd():
    spec, d = small()
    base = dict(epochs=1, batch_size=12, lr0=0.2, milestones=(), checkpoint_count=1, seed=1)
    a = train(spec, d, TrainConfig(**base))
    b = train(spec, d, TrainConfig(**base, noise_sigma=1e-12))
    assert a.total_steps == 10
    assert np.max(np.abs(a.final_params - b.final_params)) <= 1e-6


def test_divergence_detected():
    spec, d = small()
    d = type(d)(d.features * 1e150, d.labels, d.ids)
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            train(spec, d, TrainConfig(epochs=2, batch_size=8, lr0=1e10, milestones=(), checkpoint_count=1))


def test_audit_covers_dataset():
    spec, d = small()
    seen = set()
    train(spec, d, TrainConfig(epochs=1, batch_size=8, lr0=0.1, milestones=(), checkpoint_count=1), audit=seen)
    assert seen == set(d.ids.tolist())
