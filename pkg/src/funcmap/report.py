"""Comparison tables and SVG figures from stage ``metrics.json`` files."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import evaluation as ev  # noqa: E402

plt.rcParams["svg.hashsalt"] = "funcmap"
MODEL_ORDER = ("func2", "func1", "coord", "copybest", "fir", "tcn", "gru", "zero")


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def confusion_figure(cm: dict, title: str, path: Path) -> None:
    counts = np.asarray(cm["counts"], float)
    rows = counts.sum(1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    labels = cm["labels"]
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=45)
    ax.set_yticks(range(len(labels)), labels)
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if norm[i, j] > 0.5 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def sweep_figure(sweep: dict, path: Path) -> None:
    d = np.asarray(sweep["centroid_dist"])
    f = np.asarray(sweep["freqs"])
    fig, ax = plt.subplots(figsize=(5, 3))
    for j, name in enumerate(sweep["centroid_names"]):
        ax.plot(f, d[:, j], label=name)
    ax.legend(fontsize=7)
    ax.set_xlabel("sinusoid frequency (Hz)")
    ax.set_ylabel("distance to region centroid")
    ax.set_title("frequency sweep")
    _save(fig, path)


def saliency_figure(sal: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(["burst", "no burst"], [sal["mean_rank_burst"], sal["mean_rank_free"]], color=["tab:red", "tab:gray"])
    ax.set_ylabel("mean importance rank (1 = most important)")
    ax.set_title(f"saliency, p = {sal['p']:.2g}")
    _save(fig, path)


def ablation_figure(models: dict, path: Path) -> None:
    names = [m for m in MODEL_ORDER if m in models] + sorted(set(models) - set(MODEL_ORDER))
    vals = [models[m]["pooled_fisher_r"] for m in names]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(names, vals, color="tab:blue")
    for m_i, m in enumerate(names):
        ps = models[m]["per_subject"]
        ax.scatter(np.full(len(ps), m_i), ps, s=8, color="black", zorder=3)
    ax.axhline(0, color="black", lw=0.5)
    ax.set_ylabel("Fisher r (held-out windows)")
    ax.set_title("masked-region reconstruction")
    _save(fig, path)


def _write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def build_report(metrics: Sequence[tuple[Path, dict]], out: Path) -> dict:
    """Write tables and figures into ``out``; returns the combined summary."""
    summary: dict = {"embedding": [], "recon": {}}
    recon_models: dict = {}
    subjects = None
    region = None
    for src, m in metrics:
        kind = m.get("kind")
        if kind == "eval-embedding":
            tag = f"{m['objective']}_{len(summary['embedding'])}"
            row = {"source": str(src), "objective": m["objective"]}
            for mode in ("held_out_subject", "held_out_time", "held_out_channel"):
                if mode in m:
                    row[mode] = m[mode]["accuracy"]
                    confusion_figure(m[mode]["confusion"], f"{m['objective'].upper()} {mode.replace('_', ' ')}",
                                     out / f"confusion_{tag}_{mode}.svg")
            if "saliency" in m:
                row["saliency_p"] = m["saliency"]["p"]
                saliency_figure(m["saliency"], out / f"saliency_{tag}.svg")
            if "sweep" in m:
                row["sweep_adjacent"] = m["sweep"]["adjacent_distance"]
                row["sweep_ten_hz"] = m["sweep"]["ten_hz_distance"]
                row["sweep_nearest_20hz"] = m["sweep"]["nearest_at_20hz"]
                sweep_figure(m["sweep"], out / f"sweep_{tag}.svg")
            summary["embedding"].append(row)
        elif kind == "recon-scores":
            if subjects is not None and m["subjects"] != subjects:
                raise ValueError(f"{src}: subject set differs from earlier reconstruction metrics")
            if region is not None and m["region"] != region:
                raise ValueError(f"{src}: masked region {m['region']} differs from {region}")
            subjects, region = m["subjects"], m["region"]
            recon_models.update(m["models"])
    if summary["embedding"]:
        cols = ["source", "objective", "held_out_subject", "held_out_time", "held_out_channel",
                "saliency_p", "sweep_adjacent", "sweep_ten_hz", "sweep_nearest_20hz"]
        _write_table(out / "embedding_table.csv", cols, [[r.get(c, "") for c in cols] for r in summary["embedding"]])
    if recon_models:
        names = [m for m in MODEL_ORDER if m in recon_models] + sorted(set(recon_models) - set(MODEL_ORDER))
        _write_table(out / "recon_table.csv", ["model", "pooled_fisher_r", "n_valid", "n_excluded", *[f"subject_{s}" for s in subjects]],
                     [[n, recon_models[n]["pooled_fisher_r"], recon_models[n]["n_valid"], recon_models[n]["n_excluded"],
                       *recon_models[n]["per_subject"]] for n in names])
        ablation_figure(recon_models, out / "recon_ablation.svg")
        ref = next((n for n in ("func2", "func1") if n in recon_models), None)
        tests = None
        if ref and len(subjects) >= 2 and len(recon_models) > 1:
            res = ev.paired_tests(recon_models[ref]["per_subject"],
                                  {n: recon_models[n]["per_subject"] for n in names if n != ref})
            tests = res.to_dict()
            _write_table(out / "recon_tests.csv", ["comparison", "t", "p_raw", "p_holm", "p_bh", "mean_diff"],
                         [[f"{ref} vs {n}", t, p, ph, pb, d] for n, t, p, ph, pb, d in
                          zip(res.names, res.t, res.p_raw, res.p_holm, res.p_bh, res.mean_diff)])
        summary["recon"] = {"region": region, "models": recon_models, "reference": ref, "tests": tests}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=float))
    return summary
