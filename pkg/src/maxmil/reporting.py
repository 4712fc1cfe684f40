"""Multi-seed aggregation, delimited outputs and rendered figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _stat(values: list[float | None]) -> dict:
    """Mean/std over the defined entries; population std (ddof=0)."""
    defined = [v for v in values if v is not None]
    if not defined:
        return {"mean": None, "std": None, "values": values}
    arr = np.asarray(defined, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "values": values}


def aggregate_reports(reports: list[dict]) -> dict:
    """Mean and standard deviation of every metric across per-seed reports."""
    if not reports:
        raise ValueError("nothing to aggregate")
    classes = reports[0]["classes"]
    for rep in reports[1:]:
        if rep["classes"] != classes:
            raise ValueError("reports cover different class sets")
    seeds = [rep.get("provenance", {}).get("seed") for rep in reports]
    agg = {
        "runs": len(reports),
        "seeds": seeds,
        "classes": classes,
        "dataset": reports[0].get("dataset"),
        "mean_ap": _stat([rep["mean_ap"] for rep in reports]),
        "ap": {c: _stat([rep["ap"].get(c) for rep in reports]) for c in classes},
        "classification_ap": {
            c: _stat([rep["classification_ap"].get(c) for rep in reports])
            for c in classes
        },
        "proposal_recall": {
            c: _stat([rep["proposal_recall"].get(c) for rep in reports])
            for c in classes
        },
        "provenance": reports[0].get("provenance", {}),
    }
    failures = {}
    for rep in reports:
        for cls, msg in rep.get("provenance", {}).get("failures", {}).items():
            failures.setdefault(cls, []).append(msg)
    if failures:
        agg["failures"] = failures
    return agg


def _fmt_pm(stat: dict) -> str:
    if stat["mean"] is None:
        return "-"
    return f"{100.0 * stat['mean']:.1f} ± {100.0 * stat['std']:.1f}"


def aggregate_table(agg: dict) -> str:
    """Aligned text table, one column per class plus the mean, as percentages."""
    headers = ["metric"] + list(agg["classes"]) + ["mean"]
    rows = [
        ["detection AP"] + [_fmt_pm(agg["ap"][c]) for c in agg["classes"]]
        + [_fmt_pm(agg["mean_ap"])],
        ["classif AP"] + [_fmt_pm(agg["classification_ap"][c]) for c in agg["classes"]]
        + [""],
        ["recall"] + [_fmt_pm(agg["proposal_recall"][c]) for c in agg["classes"]]
        + [""],
    ]
    widths = [max(len(str(r[i])) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(str(cell).rjust(w) for cell, w in zip(row, widths))
             for row in [headers] + rows]
    lines.append("")
    lines.append(f"runs: {agg['runs']}  seeds: {agg['seeds']}")
    return "\n".join(lines) + "\n"


def write_aggregate(agg: dict, out_dir: Path, figures: bool = True) -> list[Path]:
    """Emit aggregate.json, table.txt and (optionally) figures; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    json_path = out_dir / "aggregate.json"
    json_path.write_text(json.dumps(agg, sort_keys=True, indent=2) + "\n",
                         encoding="utf-8")
    paths.append(json_path)
    table_path = out_dir / "table.txt"
    table_path.write_text(aggregate_table(agg), encoding="utf-8")
    paths.append(table_path)
    if figures:
        paths.extend(render_report_figures(agg, out_dir))
    return paths


def render_report_figures(agg: dict, out_dir: Path) -> list[Path]:
    """Bar chart of per-class detection AP with std error bars."""
    out_dir = Path(out_dir)
    classes = list(agg["classes"])
    means = [agg["ap"][c]["mean"] for c in classes]
    stds = [agg["ap"][c]["std"] for c in classes]
    xs = np.arange(len(classes))
    heights = [0.0 if m is None else 100.0 * m for m in means]
    errors = [0.0 if s is None else 100.0 * s for s in stds]

    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(classes) + 2.0), 3.5))
    ax.bar(xs, heights, yerr=errors, capsize=3, color="#4878cf")
    if agg["mean_ap"]["mean"] is not None:
        ax.axhline(100.0 * agg["mean_ap"]["mean"], color="#d65f5f", linewidth=1,
                   linestyle="--", label="mean AP")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xticks(xs)
    ax.set_xticklabels(classes, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("detection AP (%)")
    ax.set_title(f"per-class AP over {agg['runs']} run(s)")
    fig.tight_layout()
    path = out_dir / "ap_by_class.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def write_ablation_table(rows: list[dict], axis: str, out_dir: Path,
                         figures: bool = True) -> list[Path]:
    """CSV + JSON keyed by the swept value, plus a sweep figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    classes = rows[0]["aggregate"]["classes"] if rows else []

    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "mean_ap", "mean_ap_std"] + [f"ap_{c}" for c in classes])
        for row in rows:
            agg = row["aggregate"]
            writer.writerow(
                [row["value"],
                 _csv_num(agg["mean_ap"]["mean"]), _csv_num(agg["mean_ap"]["std"])]
                + [_csv_num(agg["ap"][c]["mean"]) for c in classes])
    paths.append(csv_path)

    json_path = out_dir / "ablation.json"
    json_path.write_text(
        json.dumps({"axis": axis, "rows": rows}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    paths.append(json_path)
    if figures:
        paths.append(render_ablation_figure(rows, axis, out_dir))
    return paths


def _csv_num(v):
    return "" if v is None else repr(v)


def render_ablation_figure(rows: list[dict], axis: str, out_dir: Path) -> Path:
    values = [row["value"] for row in rows]
    means = [row["aggregate"]["mean_ap"]["mean"] for row in rows]
    stds = [row["aggregate"]["mean_ap"]["std"] for row in rows]
    ys = [0.0 if m is None else 100.0 * m for m in means]
    errs = [0.0 if s is None else 100.0 * s for s in stds]
    numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool)
                  for v in values)
    xs = values if numeric else np.arange(len(values))

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, color="#4878cf")
    if not numeric:
        ax.set_xticks(xs)
        ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(axis)
    ax.set_ylabel("mean AP (%)")
    ax.set_title(f"sweep over {axis}")
    fig.tight_layout()
    path = Path(out_dir) / f"ablation_{axis}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
