import struct

import numpy as np
import pytest

from unlearn_bench.data import (FormatError, SynthSpec, load_csv, load_idx, load_source, split_train_test,
                                synth_gaussians, write_csv, write_idx)
from unlearn_bench.model import Dataset


def test_synth_counts_and_determinism():
    d = synth_gaussians(SynthSpec(8, 500, 10, 0.5, 3))
    assert len(d) == 4000
    assert np.all(np.bincount(d.labels) == 500)
    d2 = synth_gaussians(SynthSpec(8, 500, 10, 0.5, 3))
    assert np.array_equal(d.features, d2.features) and np.array_equal(d.labels, d2.labels)


def test_synth_zero_spread_is_centres():
    d = synth_gaussians(SynthSpec(3, 4, 5, 0.0, 1))
    for c in range(3):
        rows = d.features[d.labels == c]
        assert np.all(rows == rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(1.0)


def test_idx_round_trip(tmp_path):
    imgs = np.array([[[0, 255], [7, 128]], [[1, 2], [3, 4]]], dtype=np.uint8)
    write_idx(imgs, np.array([3, 1]), tmp_path / "i", tmp_path / "l")
    d = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(d.features, imgs.reshape(2, 4) / 255.0)
    assert d.features[0, 1] == 1.0
    assert d.labels.tolist() == [3, 1]


def test_idx_bad_magic(tmp_path):
    write_idx(np.zeros((1, 2, 2), np.uint8), np.array([0]), tmp_path / "i", tmp_path / "l")
    raw = bytearray((tmp_path / "i").read_bytes())
    raw[:4] = struct.pack(">I", 2050)
    (tmp_path / "bad").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "bad", tmp_path / "l")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "i")  # labels file with image magic


def test_idx_count_mismatch(tmp_path):
    write_idx(np.zeros((2, 2, 2), np.uint8), np.array([0, 1]), tmp_path / "i", tmp_path / "l")
    write_idx(np.zeros((1, 2, 2), np.uint8), np.array([0]), tmp_path / "i1", tmp_path / "l1")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "l1")


def test_csv_parse_and_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,2.0,1\n3,4,0\n")
    d = load_csv(p)
    assert d.features[0].tolist() == [1.0, 2.0] and d.labels.tolist() == [1, 0]
    p.write_text("1.0,x,1\n")
    with pytest.raises(FormatError):
        load_csv(p)
    p.write_text("1.0,2.0,5\n")
    with pytest.raises(FormatError):
        load_csv(p, n_classes=3)


def test_csv_round_trip(tmp_path):
    d = synth_gaussians(SynthSpec(2, 5, 3, 0.3, 0))
    write_csv(d, tmp_path / "x.csv")
    e = load_csv(tmp_path / "x.csv")
    assert np.array_equal(d.features, e.features) and np.array_equal(d.labels, e.labels)


def test_split_partition():
    d = Dataset(np.arange(20.0).reshape(10, 2), np.zeros(10, int))
    tr, te = split_train_test(d, 0.2, 4)
    assert (len(tr), len(te)) == (8, 2)
    assert sorted(tr.ids.tolist() + te.ids.tolist()) == list(range(10))
    tr2, te2 = split_train_test(d, 0.2, 4)
    assert np.array_equal(te.ids, te2.ids)
    with pytest.raises(ValueError):
        split_train_test(d, 1.0, 0)


def test_load_source(tmp_path):
    d = load_source({"kind": "synthetic", "cluster_count": 2, "per_cluster": 3, "dim": 2, "seed": 0})
    assert len(d) == 6
    write_csv(d, tmp_path / "a.csv")
    assert len(load_source({"kind": "csv", "path": "a.csv"}, tmp_path)) == 6
    with pytest.raises(ValueError):
        load_source({"kind": "parquet"})
