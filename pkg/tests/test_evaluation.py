import numpy as np
import pytest

from unlearn_bench import evaluation as ev
from unlearn_bench import model as mk
from unlearn_bench.evaluation import PoisonRecord
from unlearn_bench.model import Dataset, ModelSpec

from conftest import random_problem


def test_accuracy_metrics_extremes():
    spec = ModelSpec((1, 2))
    w = np.array([-10.0, 10.0, 0.0, 0.0])  # predicts 1 for x > 0
    right = Dataset([[1.0], [2.0]], [1, 1])
    wrong = Dataset([[1.0], [2.0]], [0, 0])
    assert ev.accuracy_metrics(spec, w, right, right, wrong) == (0.0, 1.0, 0.0)
    assert ev.accuracy_metrics(spec, w, wrong, right, right) == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        ev.accuracy_metrics(spec, w, right.take(np.arange(0)), right, right)


def test_mia_separable_cases():
    members, nonmembers = np.ones(20), np.zeros(20)
    assert ev.mia_score_from_features(members, nonmembers, np.zeros(7)) == (1.0, False)
    assert ev.mia_score_from_features(members, nonmembers, np.ones(7)) == (0.0, False)


def test_mia_degenerate_and_random():
    r = ev.mia_score_from_features(np.full(5, 0.3), np.full(9, 0.3), np.full(3, 0.3))
    assert r == (0.5, True)
    rng = np.random.default_rng(0)
    a, b, f = rng.random(50), rng.random(80), rng.random(30)
    s1 = ev.mia_score_from_features(a, b, f, seed=2)
    assert 0 <= s1.score <= 1 and s1 == ev.mia_score_from_features(a, b, f, seed=2)
    with pytest.raises(ValueError):
        ev.mia_score_from_features([], b, f)


def test_logistic_fit_converges():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(400)
    label = (rng.random(400) < 1 / (1 + np.exp(-(1.5 * x - 0.5)))).astype(float)
    w, b, it = ev.fit_logistic_1d(x, label)
    z = w * x + b
    r = 1 / (1 + np.exp(-z)) - label
    assert abs(np.mean(r * x)) < 1e-7 and abs(np.mean(r)) < 1e-7 and it < 10000


def test_gus_contribution_cases():
    eps = np.array([[3.0, 4.0], [3.0, 4.0], [3.0, 4.0], [1.0, 1.0]])
    grads = np.array([[6.0, 8.0], [4.0, -3.0], [1.0, 0.0], [0.0, 0.0]])
    assert ev.gus_contributions(grads, eps).tolist() == [5.0, 0.0, 3.0, 0.0]


def test_gus_poison_locality_and_zero_noise(rng):
    _, _, d = random_problem(rng, n=10)
    same, rec = ev.gus_poison(d, d.ids[:3], sigma_sq=0.0)
    assert np.array_equal(same.features, d.features) and np.all(rec.noise == 0)
    pois, rec = ev.gus_poison(d, d.ids[[1, 4]], seed=3)
    changed = np.flatnonzero(np.any(pois.features != d.features, axis=1))
    assert changed.tolist() == [1, 4]
    assert np.allclose(pois.features[[1, 4]] - d.features[[1, 4]], rec.noise)
    with pytest.raises(ValueError):
        ev.gus_poison(d, d.ids[:1], sigma_sq=-1.0)


def test_poison_record_round_trip(tmp_path, rng):
    rec = PoisonRecord([7, 3], rng.standard_normal((2, 5)), 0.062)
    rec.save(tmp_path / "p.bin")
    back = PoisonRecord.load(tmp_path / "p.bin")
    assert back.ids.tolist() == [7, 3] and np.array_equal(back.noise, rec.noise) and back.sigma_sq == 0.062
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "p.bin").read_bytes()[4:])
    with pytest.raises(ValueError):
        PoisonRecord.load(tmp_path / "bad.bin")


def test_gus_score_matches_manual(rng):
    spec, w, d = random_problem(rng, (4, 6, 3), n=8)
    _, rec = ev.gus_poison(d, d.ids[2:6], seed=1)
    G = mk.grad_inputs(spec, w, d.features[2:6], d.labels[2:6])
    want = np.mean([g @ e / np.linalg.norm(g) for g, e in zip(G, rec.noise)])
    assert ev.gus_score(spec, w, d, rec) == pytest.approx(want, rel=1e-12)
    doubled = PoisonRecord(rec.ids, 2 * rec.noise, rec.sigma_sq)
    assert ev.gus_score(spec, w, d, doubled) == pytest.approx(2 * want, rel=1e-12)
