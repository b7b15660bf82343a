"""Experiment orchestration over a run directory with a digest-keyed manifest.

Stages run in the order of ``STAGES``. Each one reads the manifest, loads the
artifacts of its upstream stages, writes its own files and then records them
in the manifest together with a digest of the configuration sections it used.
A stage whose digest matches and whose artifacts are all present is skipped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import accountant as acc
from . import difficulty as dm
from . import evaluation as ev
from . import landscape as ls
from . import model as mk
from . import storage
from . import trainer
from . import unlearn as ul
from .data import load_source, split_train_test
from .model import Dataset, ModelSpec

log = logging.getLogger(__name__)

STAGES = ("train", "score", "proxies", "split", "oracle", "unlearn", "evaluate", "barrier", "correlate", "report")

UPSTREAM = {
    "train": (),
    "score": ("train",),
    "proxies": ("train",),
    "split": ("score", "proxies"),
    "oracle": ("split",),
    "unlearn": ("oracle",),
    "evaluate": ("unlearn",),
    "barrier": ("unlearn",),
    "correlate": ("score", "proxies", "unlearn", "barrier"),
    "report": ("correlate",),
}

# Config sections each stage reads directly (upstream digests cover the rest).
SECTIONS = {
    "train": ("seeds", "dataset", "model", "train"),
    "score": ("accountant",),
    "proxies": (),
    "split": ("forget_set_size", "top_k"),
    "oracle": ("oracle_seeds",),
    "unlearn": ("unlearn",),
    "evaluate": ("evaluation",),
    "barrier": ("barrier",),
    "correlate": (),
    "report": (),
}

PROXY_NAMES = ("grad_norm_mid", "grad_norm_end", "grad_norm_average", "el2n", "c_proxy")
TRACKABLE = ("UA", "RA", "utility", "MIA")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


def canonical_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- config


_DEFAULTS = {
    "top_k": {"k": [], "metrics": ["privacy_loss", "el2n", "c_proxy"]},
    "oracle_seeds": [1000],
    "unlearn": {
        "methods": ["finetune"],
        "lr": [0.01],
        "l1_coeff": [1e-4],
        "epochs": 25,
        "batch_size": 64,
        "eval_every": 10,
        "weight_decay": 0.0,
        "noise_sigma": None,
        "metrics": ["UA"],
        "time_metric": "UA",
        "margin": 0.05,
        "pilot_budget": None,
    },
    "evaluation": {"mia": True, "gus": None, "group": None},
    "barrier": {"grid_n": 24, "metrics": ["error", "loss"], "on": "forget", "aligned": True},
}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    output_dir: Path
    seeds: tuple[int, ...]
    spec: ModelSpec
    train: trainer.TrainConfig
    forget_set_size: int
    oracle_seeds: tuple[int, ...]
    sections: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return canonical_digest({k: self.sections[k] for k in sorted(self.sections)})

    def with_overrides(self, **sections) -> "ExperimentConfig":
        raw = dict(self.raw)
        raw.update(sections)
        return parse_config(raw, self.base_dir, output_dir=self.output_dir)


def parse_config(raw: dict, base_dir=".", output_dir=None) -> ExperimentConfig:
    """Validate a config mapping; every failure is a ``ConfigError``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    base_dir = Path(base_dir)
    allowed = {"output_dir", "seeds", "dataset", "model", "train", "accountant", "forget_set_size",
               "top_k", "oracle_seeds", "unlearn", "evaluation", "barrier"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    for key in ("seeds", "dataset", "model", "train", "accountant", "forget_set_size"):
        if key not in raw:
            raise ConfigError(f"missing required key '{key}'")
    try:
        seeds = tuple(int(s) for s in raw["seeds"])
        if not seeds or len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")

        ds = dict(raw["dataset"])
        ds.setdefault("kind", "synthetic")
        ds.setdefault("test_fraction", 0.2)
        if ds["kind"] == "synthetic":
            if "seed" not in ds:
                raise ConfigError("dataset.seed is required (an integer, or \"run\" for the run seed)")
            if ds["seed"] != "run" and not isinstance(ds["seed"], int):
                raise ConfigError("dataset.seed must be an integer or \"run\"")
        for key in ("images", "labels", "path"):
            if key in ds and not (base_dir / ds[key]).exists():
                raise ConfigError(f"dataset.{key}: file not found: {base_dir / ds[key]}")
        if ds["kind"] == "idx" and not {"images", "labels"} <= set(ds):
            raise ConfigError("idx dataset needs 'images' and 'labels'")
        if ds["kind"] == "csv" and "path" not in ds:
            raise ConfigError("csv dataset needs 'path'")
        if ds["kind"] not in ("synthetic", "idx", "csv"):
            raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
        if not 0 < float(ds["test_fraction"]) < 1:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)")

        spec = ModelSpec.from_dict(raw["model"])
        tr = dict(raw["train"])
        if "seed" in tr:
            raise ConfigError("train.seed is not allowed; the run seeds come from 'seeds'")
        train_cfg = trainer.TrainConfig(**tr)

        acc_cfg = dict(raw["accountant"])
        if "sigma" not in acc_cfg or "alpha" not in acc_cfg:
            raise ConfigError("accountant needs explicit 'alpha' and 'sigma'")
        acc_cfg = _merge({"alpha": None, "sigma": None, "p": None}, acc_cfg, "accountant")
        if not float(acc_cfg["alpha"]) > 1 or not float(acc_cfg["sigma"]) > 0:
            raise ConfigError("accountant.alpha must exceed 1 and accountant.sigma must be positive")

        size = int(raw["forget_set_size"])
        if size <= 0 or size % 2:
            raise ConfigError("forget_set_size must be a positive even integer")

        top_k = _merge(_DEFAULTS["top_k"], dict(raw.get("top_k", {})), "top_k")
        for m in top_k["metrics"]:
            if m not in ("privacy_loss",) + PROXY_NAMES:
                raise ConfigError(f"top_k.metrics: unknown score {m!r}")

        oracle_seeds = tuple(int(s) for s in raw.get("oracle_seeds", _DEFAULTS["oracle_seeds"]))
        if not oracle_seeds:
            raise ConfigError("oracle_seeds must not be empty")

        un = _merge(_DEFAULTS["unlearn"], dict(raw.get("unlearn", {})), "unlearn")
        for m in un["methods"]:
            if m not in ul.METHODS:
                raise ConfigError(f"unlearn.methods: unknown method {m!r}")
        un["lr"] = [float(v) for v in np.atleast_1d(un["lr"])]
        un["l1_coeff"] = [float(v) for v in np.atleast_1d(un["l1_coeff"])]
        if not un["lr"] or not un["l1_coeff"]:
            raise ConfigError("unlearn.lr and unlearn.l1_coeff must be non-empty")
        for m in list(un["metrics"]) + [un["time_metric"]]:
            if m not in TRACKABLE:
                raise ConfigError(f"unlearn: unknown metric {m!r}")
        if un["time_metric"] not in un["metrics"]:
            un["metrics"] = list(un["metrics"]) + [un["time_metric"]]
        ul.UnlearnConfig(lr=un["lr"][0], epochs=int(un["epochs"]), batch_size=int(un["batch_size"]),
                         eval_every=int(un["eval_every"]), weight_decay=float(un["weight_decay"]))

        evaluation = _merge(_DEFAULTS["evaluation"], dict(raw.get("evaluation", {})), "evaluation")
        if evaluation["gus"] is not None:
            evaluation["gus"] = _merge({"sigma_sq": ev.GUS_SIGMA_SQ, "splits": ["top"]}, dict(evaluation["gus"]),
                                       "evaluation.gus")
        if evaluation["group"] is not None:
            evaluation["group"] = _merge({"seeds": [seeds[0]], "n_outer": 1, "n_inner": 4, "n_repeats": 20,
                                          "sigma": None}, dict(evaluation["group"]), "evaluation.group")

        barrier = _merge(_DEFAULTS["barrier"], dict(raw.get("barrier", {})), "barrier")
        if barrier["on"] not in ("forget", "retain", "train", "test"):
            raise ConfigError("barrier.on must be forget, retain, train or test")
        for m in barrier["metrics"]:
            if m not in ("loss", "error"):
                raise ConfigError(f"barrier.metrics: unknown metric {m!r}")
        if int(barrier["grid_n"]) < 2:
            raise ConfigError("barrier.grid_n must be >= 2")
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None

    env_out = os.environ.get("OUTPUT_DIR")
    if output_dir is not None:
        out = Path(output_dir)
    elif env_out:
        out = Path(env_out)
    elif "output_dir" in raw:
        out = base_dir / raw["output_dir"]
    else:
        raise ConfigError("no output_dir in config and OUTPUT_DIR is unset")

    sections = {
        "seeds": list(seeds),
        "dataset": ds,
        "model": spec.to_dict(),
        "train": train_cfg.to_dict() | {"seed": None},
        "accountant": acc_cfg,
        "forget_set_size": size,
        "top_k": top_k,
        "oracle_seeds": list(oracle_seeds),
        "unlearn": un,
        "evaluation": evaluation,
        "barrier": barrier,
    }
    return ExperimentConfig(raw, base_dir, out, seeds, spec, train_cfg, size, oracle_seeds, sections)


def load_config(path, output_dir=None) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(raw, path.parent, output_dir)


# ---------------------------------------------------------------- manifest


class Manifest:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        if self.path.exists():
            with open(self.path) as f:
                self.data = json.load(f)
        else:
            self.data = {"stages": {}}

    def entry(self, stage: str) -> dict | None:
        return self.data["stages"].get(stage)

    def is_current(self, stage: str, digest: str) -> bool:
        e = self.entry(stage)
        if not e or e.get("digest") != digest:
            return False
        return all((self.root / p).exists() for p in e["artifacts"])

    def record(self, stage: str, digest: str, artifacts, config_digest: str) -> None:
        rel = sorted({str(Path(p).resolve().relative_to(self.root.resolve())) for p in artifacts})
        self.data["config_digest"] = config_digest
        self.data["stages"][stage] = {
            "digest": digest,
            "artifacts": rel,
            "artifact_digests": {p: digest for p in rel},
        }
        storage.atomic_write_json(self.path, self.data)


# ---------------------------------------------------------------- helpers


def _write_rows(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    storage.atomic_write_bytes(path, buf.getvalue().encode())
    return path


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def read_score_table(path) -> dm.ScoreVector:
    """A privacy-loss table (id, loss) or a score table (id, score) as a ScoreVector."""
    rows = read_rows(path)
    if not rows:
        raise ValueError(f"{path}: empty score table")
    col = next((c for c in ("score", "loss", "value") if c in rows[0]), None)
    if col is None or "id" not in rows[0]:
        raise ValueError(f"{path}: need an 'id' column and one of score/loss/value")
    hih = True
    if "higher_is_harder" in rows[0]:
        hih = rows[0]["higher_is_harder"].strip().lower() in ("1", "true")
    metric = rows[0].get("metric", "privacy_loss" if col == "loss" else Path(path).stem)
    return dm.ScoreVector(np.array([int(r["id"]) for r in rows]), np.array([float(r[col]) for r in rows]),
                          metric, hih)


def split_key(label: str) -> str:
    return label.replace(":", "_").replace("-", "")


def safe_spearman(x, y) -> float:
    try:
        return dm.spearman(x, y)
    except ValueError:
        return float("nan")


def censored_times(times, total_steps: int) -> np.ndarray:
    """Times with never-reached entries replaced by one step past the budget."""
    return np.array([total_steps + 1 if t is None else t for t in times], dtype=np.float64)


@dataclass
class SeedData:
    train: Dataset
    test: Dataset


class Pipeline:
    def __init__(self, config: ExperimentConfig):
        self.cfg = config
        self.root = config.output_dir
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.root)
        self._data: dict[int, SeedData] = {}
        self._traj: dict[int, trainer.Trajectory] = {}
        self.train_calls = 0  # trainer invocations in this process, for idempotence checks

    # -- digests and bookkeeping

    def stage_digest(self, stage: str) -> str:
        own = {k: self.cfg.sections[k] for k in SECTIONS[stage]}
        up = {u: self.stage_digest(u) for u in UPSTREAM[stage]}
        return canonical_digest({"stage": stage, "sections": own, "upstream": up})

    def seed_dir(self, seed: int) -> Path:
        return self.root / f"seed_{seed}"

    def is_current(self, stage: str) -> bool:
        """Recorded digest matches and every upstream stage is current as well."""
        if not self.manifest.is_current(stage, self.stage_digest(stage)):
            return False
        return all(self.is_current(u) for u in UPSTREAM[stage])

    def _require(self, stage: str) -> None:
        for up in UPSTREAM[stage]:
            if not self.is_current(up):
                raise StageError(stage, f"requires completed stage '{up}'; run `unlearn-bench {up}` first")

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage if it is out of date. Returns True when work was done."""
        if stage not in STAGES:
            raise StageError(stage, "unknown stage")
        digest = self.stage_digest(stage)
        if not force and self.is_current(stage):
            log.info("stage %s is up to date", stage)
            return False
        self._require(stage)
        log.info("running stage %s", stage)
        fn = getattr(self, f"_stage_{stage}")
        try:
            artifacts = fn(digest)
        except StageError:
            raise
        except (storage.ChecksumError, storage.CheckpointFormatError, trainer.TrainingDiverged,
                acc.InfeasibleBound, OSError, ValueError, KeyError, FloatingPointError) as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        self.manifest.record(stage, digest, artifacts, self.cfg.digest)
        return True

    # -- shared loaders

    def data(self, seed: int) -> SeedData:
        if seed not in self._data:
            src = dict(self.cfg.sections["dataset"])
            if src.get("seed") == "run":
                src["seed"] = seed
            full = load_source(src, self.cfg.base_dir)
            full.check_classes(self.cfg.spec.n_classes)
            tr, te = split_train_test(full, float(src["test_fraction"]), seed)
            self._data[seed] = SeedData(tr, te)
        return self._data[seed]

    def train_config(self, seed: int) -> trainer.TrainConfig:
        return replace(self.cfg.train, seed=seed)

    def _train(self, dataset, config, **kw):
        self.train_calls += 1
        return trainer.train(self.cfg.spec, dataset, config, **kw)

    def _oracle(self, retain, seed):
        self.train_calls += 1
        return ul.train_oracle(self.cfg.spec, retain, self.cfg.train, seed=seed)

    def trajectory(self, seed: int) -> trainer.Trajectory:
        if seed not in self._traj:
            self._traj[seed] = storage.load_trajectory(self.seed_dir(seed) / "trajectory", self.cfg.spec)
        return self._traj[seed]

    def privacy_scores(self, seed: int) -> dm.ScoreVector:
        return read_score_table(self.seed_dir(seed) / "privacy_loss.csv")

    def proxy_scores(self, seed: int, name: str) -> dm.ScoreVector:
        return dm.ScoreVector.from_csv(self.seed_dir(seed) / "proxies" / f"{name}.csv")

    def splits(self, seed: int, kind: str | None = None) -> list[tuple[str, dm.ForgetSplit]]:
        with open(self.seed_dir(seed) / "splits" / "index.json") as f:
            index = json.load(f)
        out = []
        for item in index["splits"]:
            if kind is not None and item["kind"] != kind:
                continue
            with open(self.seed_dir(seed) / "splits" / f"{item['key']}.json") as f:
                out.append((item["kind"], dm.ForgetSplit.from_dict(json.load(f))))
        return out

    def oracle_params(self, seed: int, key: str, j: int = 0) -> np.ndarray:
        return storage.read_params(self.seed_dir(seed) / "oracles" / f"{key}_o{j}.unlb", self.cfg.spec)

    def unlearned_params(self, seed: int, method: str, key: str) -> np.ndarray:
        return storage.read_params(self.seed_dir(seed) / "unlearn" / f"{method}_{key}.unlb", self.cfg.spec)

    def hparams(self, seed: int) -> dict:
        with open(self.seed_dir(seed) / "unlearn" / "hparams.json") as f:
            return json.load(f)["methods"]

    def _check_ids(self, seed: int) -> None:
        with open(self.seed_dir(seed) / "data_split.json") as f:
            saved = json.load(f)
        d = self.data(seed)
        if saved["train_ids"] != d.train.ids.tolist():
            raise StageError("train", f"seed {seed}: regenerated training ids differ from the recorded split")

    # -- stages

    def _stage_train(self, digest):
        out = []
        for seed in self.cfg.seeds:
            d = self.data(seed)
            sd = self.seed_dir(seed)
            sd.mkdir(parents=True, exist_ok=True)
            storage.atomic_write_json(sd / "data_split.json", {
                "config_digest": digest, "seed": seed,
                "train_ids": d.train.ids.tolist(), "test_ids": d.test.ids.tolist(),
            })
            out.append(sd / "data_split.json")
            traj = self._train(d.train, self.train_config(seed))
            out += storage.save_trajectory(sd / "trajectory", self.cfg.spec, traj,
                                           {"config_digest": digest, "seed": seed})
            self._traj[seed] = traj
        return out

    def _accountant_config(self, traj, sigma=None) -> acc.AccountantConfig:
        a = self.cfg.sections["accountant"]
        return acc.AccountantConfig.for_trajectory(traj, float(a["alpha"]), float(sigma or a["sigma"]), a["p"])

    def _stage_score(self, digest):
        out = []
        for seed in self.cfg.seeds:
            traj = self.trajectory(seed)
            table = acc.privacy_loss_table(traj, self._accountant_config(traj))
            path = self.seed_dir(seed) / "privacy_loss.csv"
            table.to_csv(path)
            out.append(path)
        return out

    def _stage_proxies(self, digest):
        out = []
        for seed in self.cfg.seeds:
            traj = self.trajectory(seed)
            d = self.data(seed)
            self._check_ids(seed)
            vectors = [dm.proxy_grad_norm(traj, w) for w in ("mid", "end", "average")]
            vectors.append(dm.proxy_el2n(self.cfg.spec, dm.mid_checkpoint(traj), d.train))
            vectors.append(dm.proxy_c(traj))
            pdir = self.seed_dir(seed) / "proxies"
            pdir.mkdir(exist_ok=True)
            for v in vectors:
                v.to_csv(pdir / f"{v.metric}.csv")
                out.append(pdir / f"{v.metric}.csv")
        return out

    def _score_by_name(self, seed, name) -> dm.ScoreVector:
        return self.privacy_scores(seed) if name == "privacy_loss" else self.proxy_scores(seed, name)

    def _stage_split(self, digest):
        out = []
        top = self.cfg.sections["top_k"]
        for seed in self.cfg.seeds:
            pl = self.privacy_scores(seed)
            pl_by_id = dict(zip(pl.ids.tolist(), pl.scores.tolist()))
            sdir = self.seed_dir(seed) / "splits"
            sdir.mkdir(exist_ok=True)
            items = [("stratified", sp) for sp in dm.stratified_forget_sets(pl, self.cfg.forget_set_size)]
            for k in top["k"]:
                for name in top["metrics"]:
                    items.append(("topk", dm.top_k_forget_set(self._score_by_name(seed, name), int(k))))
            index = []
            for kind, sp in items:
                key = split_key(sp.label)
                doc = sp.to_dict() | {"config_digest": digest, "kind": kind, "key": key}
                # Every split reports its mean privacy loss, whatever score selected it.
                doc["mean_privacy_loss"] = float(np.mean([pl_by_id[int(i)] for i in sp.forget_ids]))
                storage.atomic_write_json(sdir / f"{key}.json", doc)
                out.append(sdir / f"{key}.json")
                index.append({"key": key, "kind": kind, "label": sp.label})
            storage.atomic_write_json(sdir / "index.json", {"config_digest": digest, "splits": index})
            out.append(sdir / "index.json")
        return out

    def _stage_oracle(self, digest):
        out = []
        for seed in self.cfg.seeds:
            d = self.data(seed)
            odir = self.seed_dir(seed) / "oracles"
            odir.mkdir(exist_ok=True)
            for kind, sp in self.splits(seed):
                key = split_key(sp.label)
                retain = d.train.select(sp.retain_ids)
                for j in range(len(self.cfg.oracle_seeds)):
                    w = self._oracle(retain, self.cfg.oracle_seeds[j] + seed)
                    storage.write_checkpoint(odir / f"{key}_o{j}.unlb", self.cfg.spec, w, 0)
                    out.append(odir / f"{key}_o{j}.unlb")
        return out

    def _evaluators(self, seed, forget: Dataset, retain: Dataset, names):
        spec = self.cfg.spec
        test = self.data(seed).test
        fns = {
            "UA": lambda w: 1.0 - mk.accuracy(spec, w, forget),
            "RA": lambda w: mk.accuracy(spec, w, retain),
            "utility": lambda w: mk.accuracy(spec, w, test),
            "MIA": lambda w: ev.mia_score(spec, w, retain, test, forget, seed).score,
        }
        return {n: fns[n] for n in names}

    def _unlearn_base(self, seed: int, method: str) -> ul.UnlearnConfig:
        u = self.cfg.sections["unlearn"]
        sigma = u["noise_sigma"]
        if sigma is None:
            sigma = self.cfg.train.noise_sigma
        return ul.UnlearnConfig(method=method, lr=u["lr"][0],
                                l1_coeff=u["l1_coeff"][0] if method == "l1sparse" else 0.0,
                                epochs=int(u["epochs"]), batch_size=int(u["batch_size"]),
                                eval_every=int(u["eval_every"]), seed=seed,
                                weight_decay=float(u["weight_decay"]), noise_sigma=float(sigma))

    def _choose_hparams(self, seed: int, method: str) -> ul.UnlearnConfig:
        u = self.cfg.sections["unlearn"]
        base = self._unlearn_base(seed, method)
        coeffs = u["l1_coeff"] if method == "l1sparse" else [0.0]
        if len(u["lr"]) == 1 and len(coeffs) == 1:
            return base
        # Pilot on a seeded random forget set of the configured size.
        d = self.data(seed)
        rng = np.random.default_rng([seed, 7])
        pilot_ids = np.sort(rng.choice(d.train.ids, self.cfg.forget_set_size, replace=False))
        forget, retain = d.train.select(pilot_ids), d.train.exclude(pilot_ids)
        oracle = self._oracle(retain, self.cfg.oracle_seeds[0] + seed)
        metric = u["time_metric"]
        evals = self._evaluators(seed, forget, retain, [metric])
        target = evals[metric](oracle)
        start = self.trajectory(seed).final_params

        def pilot(c):
            return ul.finetune_unlearn(self.cfg.spec, start, retain, c, evals)

        return ul.grid_search_hparams(u["lr"], coeffs, pilot, base, metric, target,
                                      u["pilot_budget"], float(u["margin"]))

    def _stage_unlearn(self, digest):
        out = []
        u = self.cfg.sections["unlearn"]
        for seed in self.cfg.seeds:
            d = self.data(seed)
            traj = self.trajectory(seed)
            udir = self.seed_dir(seed) / "unlearn"
            udir.mkdir(exist_ok=True)
            chosen = {m: self._choose_hparams(seed, m) for m in u["methods"]}
            storage.atomic_write_json(udir / "hparams.json", {
                "config_digest": digest, "methods": {m: c.to_dict() for m, c in chosen.items()}})
            out.append(udir / "hparams.json")
            rows = []
            for kind, sp in self.splits(seed):
                key = split_key(sp.label)
                forget, retain = d.train.select(sp.forget_ids), d.train.select(sp.retain_ids)
                evals = self._evaluators(seed, forget, retain, u["metrics"])
                # The target is the metric averaged over every configured oracle.
                target = float(np.mean([evals[u["time_metric"]](self.oracle_params(seed, key, j))
                                        for j in range(len(self.cfg.oracle_seeds))]))
                with open(self.seed_dir(seed) / "splits" / f"{key}.json") as f:
                    mean_pl = json.load(f)["mean_privacy_loss"]
                for method, ucfg in chosen.items():
                    run = ul.finetune_unlearn(self.cfg.spec, traj.final_params, retain, ucfg, evals,
                                              split={"label": sp.label, "kind": kind, "key": key})
                    t = ul.time_to_unlearn(run, u["time_metric"], target, float(u["margin"]))
                    total = ucfg.total_steps(len(retain))
                    stem = udir / f"{method}_{key}"
                    run.write(stem.with_suffix(".csv"), stem.with_suffix(".json"))
                    side = json.loads(stem.with_suffix(".json").read_text())
                    side |= {"config_digest": digest, "oracle_value": target, "time_to_unlearn": t,
                             "total_steps": total}
                    storage.atomic_write_json(stem.with_suffix(".json"), side)
                    storage.write_checkpoint(stem.with_suffix(".unlb"), self.cfg.spec, run.final_params, total)
                    out += [stem.with_suffix(".csv"), stem.with_suffix(".json"), stem.with_suffix(".unlb")]
                    rows.append([seed, method, kind, sp.label, repr(sp.mean_score), repr(mean_pl), u["time_metric"],
                                 repr(target), "" if t is None else t, total])
            out.append(_write_rows(udir / "times.csv", ["seed", "method", "kind", "split", "mean_score",
                                                        "mean_privacy_loss", "metric", "oracle_value", "time",
                                                        "total_steps"], rows))
        return out

    def _stage_evaluate(self, digest):
        out = []
        spec = self.cfg.spec
        e = self.cfg.sections["evaluation"]
        for seed in self.cfg.seeds:
            d = self.data(seed)
            traj = self.trajectory(seed)
            edir = self.seed_dir(seed) / "evaluation"
            edir.mkdir(exist_ok=True)
            methods = self.hparams(seed)
            rows = []
            for kind, sp in self.splits(seed):
                key = split_key(sp.label)
                forget, retain = d.train.select(sp.forget_ids), d.train.select(sp.retain_ids)
                models = {"pre": traj.final_params, "oracle": self.oracle_params(seed, key)}
                for m in methods:
                    models[f"post:{m}"] = self.unlearned_params(seed, m, key)
                for name, w in models.items():
                    ua, ra, ut = ev.accuracy_metrics(spec, w, forget, retain, d.test)
                    mia = ev.mia_score(spec, w, retain, d.test, forget, seed).score if e["mia"] else ""
                    rows.append([seed, kind, sp.label, name, repr(ua), repr(ra), repr(ut), mia if mia == "" else repr(mia)])
            out.append(_write_rows(edir / "metrics.csv", ["seed", "kind", "split", "model", "UA", "RA", "utility", "MIA"], rows))

            if e["gus"] is not None:
                out.append(self._gus(seed, digest, edir, methods))
            g = e["group"]
            if g is not None and seed in [int(s) for s in g["seeds"]]:
                rows = []
                cfg = self._accountant_config(traj, g["sigma"])
                for kind, sp in self.splits(seed, "stratified"):
                    mean, std = acc.group_loss_estimate(traj, spec, d.train, d.train.select(sp.retain_ids), cfg,
                                                        int(g["n_outer"]), int(g["n_inner"]), seed,
                                                        int(g["n_repeats"]))
                    rows.append([seed, sp.label, repr(sp.mean_score), repr(mean), repr(std), int(g["n_repeats"])])
                out.append(_write_rows(edir / "group.csv", ["seed", "split", "mean_privacy_loss", "group_mean",
                                                            "group_std", "n_repeats"], rows))
        return out

    def _gus(self, seed, digest, edir, methods) -> Path:
        """Poison one split, retrain, unlearn with the chosen settings, and score every model."""
        spec = self.cfg.spec
        g = self.cfg.sections["evaluation"]["gus"]
        d = self.data(seed)
        rows = []
        wanted = set(g["splits"])
        for kind, sp in self.splits(seed):
            if sp.label not in wanted:
                continue
            key = split_key(sp.label)
            poisoned, record = ev.gus_poison(d.train, sp.forget_ids, float(g["sigma_sq"]), seed)
            record.save(edir / f"poison_{key}.gusp")
            clean = d.train.select(sp.forget_ids)
            retain = poisoned.select(sp.retain_ids)
            w_pre = self._train(poisoned, self.train_config(seed), log_checkpoints=False).final_params
            rows.append([seed, sp.label, "pre", repr(ev.gus_score(spec, w_pre, clean, record))])
            for m, c in methods.items():
                w = ul.finetune_unlearn(spec, w_pre, retain, ul.UnlearnConfig(**c)).final_params
                rows.append([seed, sp.label, f"post:{m}", repr(ev.gus_score(spec, w, clean, record))])
            # The retain rows carry no poison, so the clean-data oracle is also the poisoned-data oracle.
            rows.append([seed, sp.label, "oracle", repr(ev.gus_score(spec, self.oracle_params(seed, key), clean, record))])
        missing = wanted - {sp.label for _, sp in self.splits(seed)}
        if missing:
            raise StageError("evaluate", f"evaluation.gus.splits: unknown split labels {sorted(missing)}")
        return _write_rows(edir / "gus.csv", ["seed", "split", "model", "gus"], rows)

    def _stage_barrier(self, digest):
        out = []
        b = self.cfg.sections["barrier"]
        spec = self.cfg.spec
        for seed in self.cfg.seeds:
            d = self.data(seed)
            traj = self.trajectory(seed)
            bdir = self.seed_dir(seed) / "barriers"
            bdir.mkdir(exist_ok=True)
            methods = self.hparams(seed)
            rows = []
            for kind, sp in self.splits(seed, "stratified"):
                key = split_key(sp.label)
                sets = {"forget": d.train.select(sp.forget_ids), "retain": d.train.select(sp.retain_ids),
                        "train": d.train, "test": d.test}
                data = sets[b["on"]]
                ref = self.oracle_params(seed, key, 0)
                pairs = {"pre": traj.final_params}
                for m in methods:
                    pairs[f"post_{m}"] = self.unlearned_params(seed, m, key)
                if len(self.cfg.oracle_seeds) > 1:
                    pairs["baseline"] = self.oracle_params(seed, key, 1)
                for which, w in pairs.items():
                    if b["aligned"]:
                        w, _ = ls.align_permutations(spec, ref, w)
                    for metric in b["metrics"]:
                        prof = ls.barrier(spec, w, ref, data, int(b["grid_n"]), metric, bool(b["aligned"]))
                        stem = bdir / f"{key}_{which}_{metric}"
                        prof.write(stem.with_suffix(".csv"), stem.with_suffix(".json"))
                        side = json.loads(stem.with_suffix(".json").read_text()) | {"config_digest": digest}
                        storage.atomic_write_json(stem.with_suffix(".json"), side)
                        out += [stem.with_suffix(".csv"), stem.with_suffix(".json")]
                        rows.append([seed, sp.label, repr(sp.mean_score), which, metric, repr(prof.barrier)])
            out.append(_write_rows(bdir / "barriers.csv", ["seed", "split", "mean_privacy_loss", "pair", "metric",
                                                           "barrier"], rows))
        return out

    def _stage_correlate(self, digest):
        rows = []
        for seed in self.cfg.seeds:
            pl = self.privacy_scores(seed)
            for name in PROXY_NAMES:
                rows.append([seed, "", f"privacy_loss~{name}", repr(safe_spearman(pl, self.proxy_scores(seed, name))),
                             len(pl)])
            times = [r for r in read_rows(self.seed_dir(seed) / "unlearn" / "times.csv") if r["kind"] == "stratified"]
            for method in sorted({r["method"] for r in times}):
                tr = [r for r in times if r["method"] == method]
                difficulty = [float(r["mean_privacy_loss"]) for r in tr]
                t = censored_times([None if r["time"] == "" else int(r["time"]) for r in tr],
                                   int(tr[0]["total_steps"]))
                rows.append([seed, method, "time~difficulty", repr(safe_spearman(difficulty, t)), len(tr)])
            bars = read_rows(self.seed_dir(seed) / "barriers" / "barriers.csv")
            for pair, metric in sorted({(r["pair"], r["metric"]) for r in bars}):
                sel = [r for r in bars if r["pair"] == pair and r["metric"] == metric]
                difficulty = [float(r["mean_privacy_loss"]) for r in sel]
                vals = [float(r["barrier"]) for r in sel]
                rows.append([seed, pair, f"barrier_{metric}~difficulty", repr(safe_spearman(difficulty, vals)), len(sel)])
        # Means over seeds; an undefined correlation counts as 0 in the mean.
        agg: dict[tuple, list] = {}
        for seed, who, what, rho, n in rows:
            agg.setdefault((who, what), []).append(float(rho))
        for (who, what), vals in sorted(agg.items()):
            vals = [0.0 if math.isnan(v) else v for v in vals]
            rows.append(["mean", who, what, repr(float(np.mean(vals))), len(vals)])
        return [_write_rows(self.root / "correlations.csv", ["seed", "subject", "quantity", "rho", "n"], rows)]

    def _stage_report(self, digest):
        from . import report

        return report.write_report(self, self.root / "report")


def run_pipeline(config: ExperimentConfig, until: str | None = None, force: bool = False) -> Pipeline:
    """Run every stage in order (through ``until``); completed stages are skipped."""
    pipe = Pipeline(config)
    last = STAGES.index(until) if until else len(STAGES) - 1
    for stage in STAGES[: last + 1]:
        pipe.run_stage(stage, force=force)
    return pipe
