"""Plot AP curves from a metrics.jsonl training log."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import DataError

# metric key in eval records -> (output file stem, y-axis label)
PLOT_SPECS = {
    "mean_ap": ("ap50", "AP50"),
    "ap_small": ("ap_small", "AP50 (small)"),
    "ap_medium": ("ap_medium", "AP50 (medium)"),
    "ap_large": ("ap_large", "AP50 (large)"),
}


def read_eval_records(log_path: str) -> list[dict]:
    if not os.path.isfile(log_path):
        raise DataError(f"metrics log not found: {log_path}")
    records = []
    with open(log_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{log_path}:{lineno}: bad JSON line: {e}") from e
            if rec.get("type") == "eval":
                records.append(rec)
    return records


def plot_metrics(log_path: str, out_dir: str) -> list[str]:
    """One PNG per AP metric, AP versus iteration. Returns written paths."""
    records = read_eval_records(log_path)
    if not records:
        raise DataError(f"no eval records in {log_path}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for key, (stem, label) in PLOT_SPECS.items():
        points = [
            (r["iteration"], r[key])
            for r in records
            if r.get(key) is not None
        ]
        if not points:
            continue
        xs, ys = zip(*points)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
        ax.set_title(f"{label} on validation")
        ax.grid(True, alpha=0.3)
        ax.set_ylim(bottom=0.0)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{stem}.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
