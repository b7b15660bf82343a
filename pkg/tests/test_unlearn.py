import numpy as np
import pytest
from dataclasses import replace

from unlearn_bench import model as mk
from unlearn_bench import unlearn as ul
from unlearn_bench.data import SynthSpec, synth_gaussians
from unlearn_bench.model import ModelSpec
from unlearn_bench.trainer import TrainConfig, TrainingDiverged, sgld_step, train
from unlearn_bench.unlearn import UnlearnConfig, UnlearnRun


@pytest.fixture(scope="module")
def problem():
    d = synth_gaussians(SynthSpec(3, 20, 4, 0.5, 1))
    spec = ModelSpec((4, 6, 3))
    traj = train(spec, d, TrainConfig(epochs=4, batch_size=8, lr0=0.2, milestones=(), checkpoint_count=2))
    return spec, d, traj


def acc_eval(spec, d):
    return lambda w: mk.accuracy(spec, w, d)


def test_soft_threshold_cases():
    assert ul.soft_threshold(np.array([0.5]), 0.1)[0] == pytest.approx(0.4)
    assert ul.l1_sparse_step(np.array([0.5]), np.zeros(1), 0.1, 1.0)[0] == pytest.approx(0.4)
    killed = ul.l1_sparse_step(np.array([0.05, -0.05, 0.3]), np.zeros(3), 0.1, 1.0)
    assert killed[0] == 0 and killed[1] == 0 and killed[2] == pytest.approx(0.2)
    w, g = np.array([1.0, -2.0]), np.array([0.3, 0.1])
    assert np.array_equal(ul.l1_sparse_step(w, g, 0.1, 0.0), sgld_step(w, g, 0.1, 0.0, 0.0))


def test_lr_zero_is_noop(problem):
    spec, d, traj = problem
    retain = d.take(np.arange(10, len(d)))
    run = ul.finetune_unlearn(spec, traj.final_params, retain, UnlearnConfig(lr=0.0, epochs=2, batch_size=8),
                              {"RA": acc_eval(spec, retain)})
    assert np.array_equal(run.final_params, traj.final_params)
    assert np.ptp(run.series("RA")) == 0


def test_eval_schedule(problem):
    spec, d, traj = problem
    retain = d.take(np.arange(10, len(d)))  # 50 examples -> 7 steps per epoch
    cfg = UnlearnConfig(lr=0.05, epochs=2, batch_size=8, eval_every=14)
    assert cfg.total_steps(len(retain)) == 14
    run = ul.finetune_unlearn(spec, traj.final_params, retain, cfg, {"RA": acc_eval(spec, retain)})
    assert run.steps.tolist() == [0, 14]
    run = ul.finetune_unlearn(spec, traj.final_params, retain, replace(cfg, eval_every=5))
    assert run.steps.tolist() == [0, 5, 10, 14]


def test_only_retain_touched_and_deterministic(problem):
    spec, d, traj = problem
    retain = d.take(np.arange(10, len(d)))
    seen = set()
    cfg = UnlearnConfig(method="l1sparse", lr=0.05, l1_coeff=1e-3, epochs=2, batch_size=8, seed=4)
    a = ul.finetune_unlearn(spec, traj.final_params, retain, cfg, audit=seen)
    assert seen == set(retain.ids.tolist())
    b = ul.finetune_unlearn(spec, traj.final_params, retain, cfg)
    assert np.array_equal(a.final_params, b.final_params)


def test_l1_zero_matches_finetune(problem):
    spec, d, traj = problem
    retain = d.take(np.arange(10, len(d)))
    base = UnlearnConfig(lr=0.05, epochs=2, batch_size=8, weight_decay=1e-3)
    a = ul.finetune_unlearn(spec, traj.final_params, retain, base)
    b = ul.finetune_unlearn(spec, traj.final_params, retain, replace(base, method="l1sparse"))
    assert np.array_equal(a.final_params, b.final_params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(problem):
    spec, d, traj = problem
    with pytest.raises(TrainingDiverged):
        ul.finetune_unlearn(spec, traj.final_params * 1e3, d, UnlearnConfig(lr=1e12, epochs=3, batch_size=8),
                            {"loss": lambda w: mk.loss(spec, w, d.features, d.labels)})


def test_config_validation():
    with pytest.raises(ValueError):
        UnlearnConfig(method="ascent")
    with pytest.raises(ValueError):
        UnlearnConfig(l1_coeff=0.1)
    with pytest.raises(ValueError):
        UnlearnConfig(lr=-1.0)


def test_oracle_seeds(problem):
    spec, d, _ = problem
    cfg = TrainConfig(epochs=2, batch_size=8, lr0=0.1, milestones=(), seed=5)
    seen = set()
    retain = d.take(np.arange(30))
    a = ul.train_oracle(spec, retain, cfg, audit=seen)
    assert seen == set(retain.ids.tolist())
    assert np.array_equal(a, ul.train_oracle(spec, retain, cfg))
    assert not np.array_equal(a, ul.train_oracle(spec, retain, cfg, seed=6))
    full = ul.train_oracle(spec, d, cfg)
    assert np.array_equal(full, train(spec, d, replace(cfg, checkpoint_count=1)).final_params)


def series_run(values, steps=None, lr=0.1):
    steps = np.arange(len(values)) * 10 if steps is None else np.asarray(steps)
    return UnlearnRun(steps, {"UA": np.asarray(values, dtype=float)}, np.zeros(1), UnlearnConfig(lr=lr))


def test_time_to_unlearn_cases():
    assert ul.time_to_unlearn(series_run([0.5, 0.3, 0.12, 0.08]), "UA", 0.1) == 20
    assert ul.time_to_unlearn(series_run([0.11, 0.3]), "UA", 0.1) == 0
    assert ul.time_to_unlearn(series_run([0.5, 0.4]), "UA", 0.1) is None
    with pytest.raises(KeyError):
        ul.time_to_unlearn(series_run([0.5]), "MIA", 0.1)


def test_run_csv_round_trip(tmp_path):
    r = series_run([0.5, 0.25])
    r.write(tmp_path / "r.csv", tmp_path / "r.json")
    back = UnlearnRun.read(tmp_path / "r.csv", tmp_path / "r.json")
    assert back.steps.tolist() == [0, 10] and back.series("UA").tolist() == [0.5, 0.25]
    assert back.config == r.config


def grid_pilot(table):
    return lambda cfg: series_run(table[cfg.lr], lr=cfg.lr)


def test_grid_search_cases():
    base = UnlearnConfig(epochs=25)
    one = ul.grid_search_hparams([0.3], [], grid_pilot({0.3: [0.9, 0.8]}), base, "UA", 0.1)
    assert one.lr == 0.3 and one.epochs == 25
    pick = ul.grid_search_hparams([0.1, 0.2], [], grid_pilot({0.1: [0.9, 0.8], 0.2: [0.9, 0.1]}), base, "UA", 0.1)
    assert pick.lr == 0.2
    table = {0.1: [0.9, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1], 0.2: [0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.1]}
    fast = ul.grid_search_hparams([0.2, 0.1], [], grid_pilot(table), base, "UA", 0.1)
    assert fast.lr == 0.1
    tie = ul.grid_search_hparams([0.2, 0.1], [], grid_pilot({0.1: [0.1], 0.2: [0.1]}), base, "UA", 0.1)
    assert tie.lr == 0.1
    none = ul.grid_search_hparams([0.1, 0.2], [], grid_pilot({0.1: [0.9, 0.5], 0.2: [0.9, 0.3]}), base, "UA", 0.1)
    assert none.lr == 0.2
    budgeted = ul.grid_search_hparams([0.1], [], grid_pilot({0.1: [0.1]}), base, "UA", 0.1, budget=3)
    assert budgeted.epochs == 25
    with pytest.raises(ValueError):
        ul.grid_search_hparams([], [], grid_pilot({}), base, "UA", 0.1)
    with pytest.raises(ValueError):
        ul.grid_search_hparams([0.1], [], grid_pilot({}), UnlearnConfig(method="l1sparse"), "UA", 0.1)
