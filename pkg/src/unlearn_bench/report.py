"""Summary CSV and static SVG charts for a completed run directory."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import difficulty as dm  # noqa: E402


def _time_value(row) -> float:
    return float(int(row["total_steps"]) + 1) if row["time"] == "" else float(row["time"])


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def write_report(pipe, outdir) -> list[Path]:
    from .pipeline import PROXY_NAMES, _write_rows, read_rows, split_key

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    seeds = pipe.cfg.seeds
    written: list[Path] = []
    summary = []

    # time-to-unlearn vs mean privacy loss
    groups = defaultdict(list)
    for seed in seeds:
        for r in read_rows(pipe.seed_dir(seed) / "unlearn" / "times.csv"):
            groups[(r["method"], r["kind"], r["split"])].append(r)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({k[0] for k in groups}):
        keys = [k for k in groups if k[0] == method and k[1] == "stratified"]
        pts = sorted((np.mean([float(r["mean_privacy_loss"]) for r in groups[k]]),
                      np.mean([_time_value(r) for r in groups[k]]), k[2]) for k in keys)
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=method)
    for (method, kind, split), rows in sorted(groups.items()):
        summary.append(["time_to_unlearn", method, kind, split,
                        repr(float(np.mean([float(r["mean_privacy_loss"]) for r in rows]))),
                        repr(float(np.mean([_time_value(r) for r in rows]))), len(rows)])
    ax.set_xlabel("mean privacy loss of forget set")
    ax.set_ylabel("steps to unlearn")
    ax.legend()
    written.append(_save(fig, outdir / "time_vs_privacy_loss.svg"))

    # metric time series with oracle reference, first seed and method
    seed0 = seeds[0]
    udir = pipe.seed_dir(seed0) / "unlearn"
    method0 = sorted(pipe.hparams(seed0))[0]
    metric = pipe.cfg.sections["unlearn"]["time_metric"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, (kind, sp) in enumerate(pipe.splits(seed0, "stratified")):
        key = split_key(sp.label)
        stem = udir / f"{method0}_{key}"
        rows = [r for r in read_rows(stem.with_suffix(".csv")) if r["metric"] == metric]
        side = json.loads(stem.with_suffix(".json").read_text())
        c = f"C{i}"
        ax.plot([int(r["step"]) for r in rows], [float(r["value"]) for r in rows], color=c, label=key)
        ax.axhline(side["oracle_value"], color=c, linestyle="--", linewidth=0.8)
    ax.set_xlabel("unlearning step")
    ax.set_ylabel(metric)
    ax.set_title(f"{method0}, seed {seed0} (dashed: oracle)")
    ax.legend(fontsize=7)
    written.append(_save(fig, outdir / "metric_series.svg"))

    # barrier vs difficulty
    bars = defaultdict(list)
    for seed in seeds:
        for r in read_rows(pipe.seed_dir(seed) / "barriers" / "barriers.csv"):
            bars[(r["metric"], r["pair"], r["split"])].append(r)
    metrics = sorted({k[0] for k in bars})
    fig, axes = plt.subplots(1, max(1, len(metrics)), figsize=(4.5 * max(1, len(metrics)), 3.5), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        for pair in sorted({k[1] for k in bars if k[0] == m}):
            keys = [k for k in bars if k[0] == m and k[1] == pair]
            pts = sorted((np.mean([float(r["mean_privacy_loss"]) for r in bars[k]]),
                          np.mean([float(r["barrier"]) for r in bars[k]])) for k in keys)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=pair)
        ax.set_xlabel("mean privacy loss of forget set")
        ax.set_ylabel(f"{m} barrier")
        ax.legend(fontsize=7)
    for (m, pair, split), rows in sorted(bars.items()):
        summary.append([f"barrier_{m}", pair, "stratified", split,
                        repr(float(np.mean([float(r["mean_privacy_loss"]) for r in rows]))),
                        repr(float(np.mean([float(r["barrier"]) for r in rows]))), len(rows)])
    written.append(_save(fig, outdir / "barrier_vs_difficulty.svg"))

    # binned proxies against privacy loss
    pl = pipe.privacy_scores(seed0)
    fig, axes = plt.subplots(1, len(PROXY_NAMES), figsize=(3.2 * len(PROXY_NAMES), 3))
    for ax, name in zip(axes, PROXY_NAMES):
        pts = dm.bin_means(pl, pipe.proxy_scores(seed0, name), 30)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], ".-")
        ax.set_xlabel("privacy loss")
        ax.set_title(name, fontsize=9)
    written.append(_save(fig, outdir / "proxies_binned.svg"))

    # top-k comparison, when present
    top = [k for k in groups if k[1] == "topk"]
    if top:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        labels = sorted({k[2] for k in top})
        for j, method in enumerate(sorted({k[0] for k in top})):
            vals = [np.mean([_time_value(r) for r in groups[(method, "topk", lab)]]) for lab in labels]
            ax.bar(np.arange(len(labels)) + 0.4 * j, vals, width=0.4, label=method)
        ax.set_xticks(np.arange(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("steps to unlearn")
        ax.legend()
        written.append(_save(fig, outdir / "topk_times.svg"))

    for r in read_rows(pipe.root / "correlations.csv"):
        if r["seed"] == "mean":
            summary.append(["correlation", r["subject"], "", r["quantity"], "", r["rho"], r["n"]])
    written.append(_write_rows(outdir / "summary.csv",
                               ["table", "subject", "kind", "split", "mean_privacy_loss", "value", "n"], summary))
    return written
