"""Collate stage reports into CSV/JSON tables and draw figures."""
from __future__ import annotations

import csv
import hashlib
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CSV_COLUMNS = ("method", "P", "E", "T", "trial", "accuracy", "precision", "recall", "seed")
METRICS = ("accuracy", "precision", "recall")


def _yn(v):
    return "yes" if v else "no"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return _yn(v)
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path, rows, lead=()):
    """One row per (cell, trial); ``lead`` columns come before the fixed ones."""
    cols = list(lead) + list(CSV_COLUMNS)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values)) if len(values) > 1 else 0.0


def aggregate(rows, keys):
    """Mean/std of the metrics over trials, grouped by ``keys``."""
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(r.get(k) for k in keys)].append(r)
    out = []
    for key, members in groups.items():
        entry = dict(zip(keys, key))
        entry["trials"] = len(members)
        for m in METRICS + ("downstream_accuracy",):
            if any(m in r for r in members):
                entry[f"{m}_mean"], entry[f"{m}_std"] = _mean_std([r.get(m) for r in members])
        out.append(entry)
    return out


STUDY_KEYS = {
    "knowledge": ["knowledge", "method"],
    "n": ["n", "method"],
    "metric": ["similarity", "method"],
    "size": ["pretrain_size", "shadow_size", "method"],
    "overlap": ["overlap", "method"],
    "early-stopping": ["epoch", "method"],
}


def load_reports(reports_dir):
    reports_dir = Path(reports_dir)
    out = {}
    for path in sorted(reports_dir.glob("*.json")):
        if path.name == "summary.json":
            continue
        out[path.stem] = json.loads(path.read_text())
    return out


def inputs_digest(reports_dir):
    h = hashlib.sha256()
    for path in sorted(Path(reports_dir).glob("*.json")):
        if path.name == "summary.json":
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def collate(reports_dir, plots_dir):
    """Write report.csv, per-study CSVs, summary.json and plots; return the summary."""
    reports_dir, plots_dir = Path(reports_dir), Path(plots_dir)
    reports = load_reports(reports_dir)
    main_rows = [r for name, rep in reports.items()
                 if name.startswith(("evaluate-", "baselines-")) for r in rep["rows"]]
    main_rows.sort(key=lambda r: (r["knowledge"], r["method"], r["trial"]))
    write_csv(reports_dir / "report.csv", main_rows)
    summary = {"cells": aggregate(main_rows, ["knowledge", "method"]), "studies": {},
               "audits": {}}
    for name, rep in reports.items():
        if name.startswith("study-"):
            axis = rep["axis"]
            rows = rep["rows"]
            if axis == "overfitting":
                summary["studies"][name] = {"axis": axis, "rows": rows}
                plot_overfitting(rows, plots_dir / f"{name}.png")
                continue
            keys = STUDY_KEYS[axis]
            write_csv(reports_dir / f"{name}.csv", rows, lead=keys[:-1])
            agg = aggregate(rows, keys)
            summary["studies"][name] = {"axis": axis, "values": rep["values"], "cells": agg}
            plot_study(axis, agg, keys, plots_dir / f"{name}.png")
        elif name.startswith("audit-remote-"):
            summary["audits"][name] = [{k: r.get(k) for k in CSV_COLUMNS} for r in rep["rows"]]
    for name, rep in reports.items():
        if name.startswith("evaluate-"):
            plot_pr_curves(rep["rows"], plots_dir / f"pr-{name[len('evaluate-'):]}.png")
    (reports_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# plots

def _save(fig, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes a function of the data alone
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_pr_curves(rows, path):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for r in rows:
        if r.get("trial") != 0 or not r.get("pr_curve"):
            continue
        pts = [(rec, prec) for _, prec, rec in r["pr_curve"] if prec is not None]
        if pts:
            rec, prec = zip(*pts)
            ax.plot(rec, prec, marker=".", label=r["method"])
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_study(axis, agg, keys, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    by_method = defaultdict(list)
    for e in agg:
        by_method[e["method"]].append(e)
    for method, entries in sorted(by_method.items()):
        labels = [" x ".join(str(e[k]) for k in keys[:-1]) for e in entries]
        means = [e.get("accuracy_mean") or 0.0 for e in entries]
        stds = [e.get("accuracy_std") or 0.0 for e in entries]
        ax.errorbar(range(len(labels)), means, yerr=stds, marker="o", capsize=3, label=method)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, fontsize=8)
        if axis in ("early-stopping", "overlap") and any("downstream_accuracy_mean" in e
                                                         for e in entries):
            down = [e.get("downstream_accuracy_mean") for e in entries]
            if all(d is not None for d in down):
                ax.plot(range(len(labels)), down, ls="--", marker="s",
                        label=f"{method} (downstream)")
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_overfitting(rows, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    epochs = [r["epoch"] for r in rows]
    ax.plot(epochs, [r["member_similarity"] for r in rows], marker="o", label="members")
    ax.plot(epochs, [r["nonmember_similarity"] for r in rows], marker="s", label="non-members")
    ax.set_xlabel("epoch")
    ax.set_ylabel("average pairwise cosine")
    ax.legend(fontsize=8)
    _save(fig, path)
