"""Figures rendered from emitted reports, with machine-readable sidecars.

Three kinds: per-task accuracy lines, poison-ratio curves, and per-class
activation scatter panels.  Every image gets a ``<stem>.data.json``
sidecar carrying the plotted series and the config digests, so figures
can be checked against the CSVs they were drawn from.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .report import atomic_write_text


def _as_dict(report) -> dict:
    from .report import report_to_dict

    if isinstance(report, (str, Path)):
        with open(report) as f:
            return json.load(f)
    if isinstance(report, dict):
        return report
    return report_to_dict(report)


def _write_sidecar(image_path: Path, payload: dict) -> Path:
    sidecar = image_path.with_name(image_path.stem + ".data.json")
    atomic_write_text(sidecar, json.dumps(payload, indent=2) + "\n")
    return sidecar


def plot_task_lines(reports, out_path: str | Path) -> dict:
    """Per-task accuracy lines, clean solid and backdoor dashed per run."""
    reports = [_as_dict(r) for r in reports]
    if not reports:
        raise ValueError("no reports to plot")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    series = {}
    max_tasks = 0
    for i, rep in enumerate(reports):
        color = f"C{i % 10}"
        clean = np.mean(rep["clean_acc"], axis=0)
        tasks = np.arange(1, len(clean) + 1)
        max_tasks = max(max_tasks, len(clean))
        label = rep.get("name") or rep["config_digest"]
        ax.plot(tasks, clean, "-o", color=color, ms=3, lw=1.2, label=f"{label} clean")
        entry = {"config_digest": rep["config_digest"], "clean": clean.tolist()}
        if rep.get("trigger_acc") is not None:
            trig = np.mean(rep["trigger_acc"], axis=0)
            ax.plot(tasks, trig, "--s", color=color, ms=3, lw=1.2, label=f"{label} backdoor")
            entry["backdoor"] = trig.tolist()
        series[label] = entry
    ax.set_xlabel("task")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xticks(np.arange(1, max_tasks + 1))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)

    sidecar = _write_sidecar(out_path, {"kind": "per-task-lines", "series": series})
    return {"image": str(out_path), "data": str(sidecar)}


def plot_ratio_curves(reports, out_path: str | Path) -> dict:
    """Average accuracy vs poison ratio; needs reports from a ratio sweep."""
    reports = [_as_dict(r) for r in reports]
    if not reports:
        raise ValueError("no reports to plot")
    rows = []
    for rep in reports:
        extras = rep.get("extras") or {}
        if "ratio" not in extras:
            raise ValueError(f"report {rep.get('name')!r} carries no sweep ratio")
        rows.append((float(extras["ratio"]), rep))
    rows.sort(key=lambda t: t[0])

    ratios = [r for r, _ in rows]
    clean = [rep["clean_avg"] for _, rep in rows]
    trig = [rep.get("trigger_avg") for _, rep in rows]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4))
    x = [100 * r for r in ratios]
    ax.plot(x, clean, "-o", color="C0", label="clean")
    if all(t is not None for t in trig):
        ax.plot(x, trig, "--s", color="C3", label="backdoor")
    ax.set_xlabel("poison ratio (%)")
    ax.set_ylabel("average accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)

    sidecar = _write_sidecar(out_path, {
        "kind": "ratio-curves",
        "config_digests": [rep["config_digest"] for _, rep in rows],
        "ratios": ratios,
        "clean_avg": clean,
        "trigger_avg": trig,
    })
    return {"image": str(out_path), "data": str(sidecar)}


def plot_defense_scatter(report, out_dir: str | Path, stem: str = "defense") -> dict:
    """One scatter panel per analyzed class, plus the recovered trigger image."""
    if not isinstance(report, dict):
        from .defense import defense_report_to_dict

        report = defense_report_to_dict(report)
    per_class = report.get("per_class") or {}
    if not per_class:
        raise ValueError("defense report has no analyzed classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    classes = sorted(per_class, key=int)
    ncols = min(5, len(classes))
    nrows = (len(classes) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.6 * ncols, 2.6 * nrows),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i, c in enumerate(classes):
        info = per_class[c]
        pts = np.asarray(info["points"])
        assign = np.asarray(info["assignment"])
        ax = axes[i // ncols][i % ncols]
        ax.axis("on")
        for j, color in ((0, "C0"), (1, "C3")):
            sel = assign == j
            ax.scatter(pts[sel, 0], pts[sel, 1], s=3, color=color, alpha=0.5)
        suspect = report.get("suspect_class")
        mark = " *" if suspect is not None and int(c) == int(suspect) else ""
        ax.set_title(f"class {c}{mark}  s={info['silhouette']:.2f}", fontsize=8)
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    scatter_path = out_dir / f"{stem}-clusters.png"
    fig.savefig(scatter_path, dpi=150)
    plt.close(fig)

    paths = {"clusters": str(scatter_path)}
    if report.get("recovered_trigger") is not None:
        trig = np.asarray(report["recovered_trigger"], dtype=np.float64)
        trig_path = out_dir / f"{stem}-recovered-trigger.png"
        plt.imsave(trig_path, np.clip(trig, 0, 1), cmap="gray", vmin=0, vmax=1)
        paths["recovered_trigger"] = str(trig_path)

    sidecar = _write_sidecar(scatter_path, {
        "kind": "defense-scatter",
        "suspect_class": report.get("suspect_class"),
        "silhouettes": {c: per_class[c]["silhouette"] for c in classes},
        "cluster_sizes": {c: per_class[c]["cluster_sizes"] for c in classes},
    })
    paths["data"] = str(sidecar)
    return paths
