"""Reporting: delimited metric dumps plus matplotlib figures rendered to files.

Every report call writes a CSV next to the figures it produces so results are
both machine-readable and visually inspectable without a display server.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_csv(path: str, rows: list, fieldnames=None) -> None:
    """Rows of dicts -> CSV; fieldnames default to union in first-seen order."""
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def training_report(history: list, out_dir: str, stem: str = "training") -> list:
    """Write <stem>.csv plus loss / validation-metric curves as PNG files.

    Returns the list of file paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    write_csv(csv_path, history)
    paths.append(csv_path)

    steps = [row["step"] for row in history if "loss" in row]
    losses = [row["loss"] for row in history if "loss" in row]
    if steps:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, losses, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title("training loss")
        fig.tight_layout()
        fig_path = os.path.join(out_dir, f"{stem}_loss.png")
        fig.savefig(fig_path, dpi=100)
        plt.close(fig)
        paths.append(fig_path)

    val_keys = sorted({k for row in history for k in row
                       if k.startswith("val_")})
    for key in val_keys:
        pts = [(row["step"], row[key]) for row in history if key in row]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel(key[4:])
        ax.set_ylim(0, 1.05)
        ax.set_title(key[4:].replace("_", " "))
        fig.tight_layout()
        fig_path = os.path.join(out_dir, f"{stem}_{key[4:]}.png")
        fig.savefig(fig_path, dpi=100)
        plt.close(fig)
        paths.append(fig_path)
    return paths


def metrics_report(metric_rows: list, out_dir: str,
                   stem: str = "metrics") -> list:
    """Write a CSV of {name, value} metric rows plus a bar-chart figure."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    write_csv(csv_path, metric_rows, ["name", "value"])
    paths = [csv_path]
    names = [row["name"] for row in metric_rows]
    values = [row["value"] for row in metric_rows]
    if names:
        fig, ax = plt.subplots(figsize=(max(4, len(names) * 1.2), 4))
        ax.bar(range(len(names)), values)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylim(0, max(1.0, max(values) * 1.1))
        for i, v in enumerate(values):
            ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
        fig.tight_layout()
        fig_path = os.path.join(out_dir, f"{stem}.png")
        fig.savefig(fig_path, dpi=100)
        plt.close(fig)
        paths.append(fig_path)
    return paths
