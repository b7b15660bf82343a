import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from unlearn_bench import cli
from unlearn_bench import pipeline as pl

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    pipe = pl.run_pipeline(pl.load_config(SMOKE, output_dir=out))
    return out, pipe


def test_full_run_outputs(smoke_run):
    out, pipe = smoke_run
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["stages"]) == set(pl.STAGES)
    for stage in man["stages"].values():
        assert stage["artifacts"] and all((out / p).exists() for p in stage["artifacts"])
    assert pipe.train_calls > 0
    svgs = list((out / "report").glob("*.svg"))
    assert len(svgs) >= 4 and (out / "report" / "summary.csv").exists()
    times = pl.read_rows(out / "seed_0" / "unlearn" / "times.csv")
    assert {r["method"] for r in times} == {"finetune", "l1sparse"}
    assert len({r["split"] for r in times if r["kind"] == "stratified"}) == 5
    corr = pl.read_rows(out / "correlations.csv")
    assert any(r["seed"] == "mean" and r["quantity"] == "privacy_loss~grad_norm_average" for r in corr)


def test_rerun_is_noop(smoke_run):
    out, _ = smoke_run
    before = (out / "manifest.json").read_text()
    again = pl.run_pipeline(pl.load_config(SMOKE, output_dir=out))
    assert again.train_calls == 0
    assert (out / "manifest.json").read_text() == before


def test_split_artifacts(smoke_run):
    out, _ = smoke_run
    split_dir = out / "seed_0" / "splits"
    index = json.loads((split_dir / "index.json").read_text())
    strat = [e["key"] for e in index["splits"] if e["kind"] == "stratified"]
    docs = [json.loads((split_dir / f"{k}.json").read_text()) for k in strat]
    forget = [set(d["forget_ids"]) for d in docs]
    assert all(len(f) == 10 for f in forget)
    assert sum(len(f) for f in forget) == len(set().union(*forget))
    means = [d["mean_privacy_loss"] for d in docs]
    assert means == sorted(means)


def copy_run(src, dst):
    shutil.copytree(src, dst)
    return dst


def test_corrupted_checkpoint_exit_2(smoke_run, tmp_path, monkeypatch, capsys):
    out = copy_run(smoke_run[0], tmp_path / "run")
    ckpt = sorted((out / "seed_0" / "trajectory").glob("ckpt_*.unlb"))[0]
    blob = bytearray(ckpt.read_bytes())
    blob[-12] ^= 0x01
    ckpt.write_bytes(bytes(blob))
    monkeypatch.setenv("OUTPUT_DIR", str(out))
    assert cli.main(["score", "--config", str(SMOKE), "--force"]) == 2
    err = capsys.readouterr().err
    assert "score" in err and "checksum" in err


def test_config_errors(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad)]) == 1
    raw = json.loads(SMOKE.read_text())
    raw["train"]["seed"] = 3
    (tmp_path / "seeded.json").write_text(json.dumps(raw))
    assert cli.main(["train", "--config", str(tmp_path / "seeded.json")]) == 1
    raw = json.loads(SMOKE.read_text())
    raw["forget_set_size"] = 7
    with pytest.raises(pl.ConfigError):
        pl.parse_config(raw, SMOKE.parent, tmp_path)
    raw = json.loads(SMOKE.read_text())
    del raw["accountant"]["sigma"]
    with pytest.raises(pl.ConfigError):
        pl.parse_config(raw, SMOKE.parent, tmp_path)
    assert "config error" in capsys.readouterr().err


def test_missing_upstream_names_stage(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "fresh"))
    assert cli.main(["oracle", "--config", str(SMOKE)]) == 2
    assert "split" in capsys.readouterr().err


def test_output_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "env"))
    assert pl.load_config(SMOKE).output_dir == tmp_path / "env"
    assert pl.load_config(SMOKE, output_dir=tmp_path / "arg").output_dir == tmp_path / "arg"
    monkeypatch.delenv("OUTPUT_DIR")
    assert pl.load_config(SMOKE).output_dir.resolve() == (SMOKE.parent / "../runs/smoke").resolve()


def test_split_size_override(smoke_run, tmp_path, monkeypatch, capsys):
    out = copy_run(smoke_run[0], tmp_path / "run")
    monkeypatch.setenv("OUTPUT_DIR", str(out))
    assert cli.main(["split", "--config", str(SMOKE), "--size", "6"]) == 0
    split_dir = out / "seed_0" / "splits"
    keys = [e["key"] for e in json.loads((split_dir / "index.json").read_text())["splits"]
            if e["kind"] == "stratified"]
    forget = [set(json.loads((split_dir / f"{k}.json").read_text())["forget_ids"]) for k in keys]
    assert len(forget) == 5 and all(len(f) == 6 for f in forget)
    assert len(set().union(*forget)) == 30
    # downstream stages see the changed split digest and refuse to run on stale inputs
    assert cli.main(["unlearn", "--config", str(SMOKE)]) == 2


def test_correlate_tables(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("id,score\n1,0.1\n2,0.2\n3,0.3\n4,0.4\n")
    (tmp_path / "b.csv").write_text("id,loss\n4,9.0\n3,1.0\n2,0.5\n1,0.1\n")
    assert cli.main(["correlate", "--a", str(tmp_path / "a.csv"), "--b", str(tmp_path / "b.csv")]) == 0
    assert capsys.readouterr().out.strip() == "spearman_rho=1.000000 n=4"
    assert cli.main(["correlate", "--a", str(tmp_path / "a.csv")]) == 1


def test_correlate_with_config_prints_means(smoke_run, monkeypatch, capsys):
    monkeypatch.setenv("OUTPUT_DIR", str(smoke_run[0]))
    assert cli.main(["correlate", "--config", str(SMOKE)]) == 0
    assert "spearman_rho=" in capsys.readouterr().out


def test_helpers():
    assert pl.split_key("top-10:el2n") == "top10_el2n"
    assert pl.censored_times([5, None], 20).tolist() == [5.0, 21.0]
    assert np.isnan(pl.safe_spearman([1, 1, 1], [1, 2, 3]))
    assert pl.canonical_digest({"a": 1, "b": 2}) == pl.canonical_digest({"b": 2, "a": 1})
