# =============================================================================
# METRIC REPORTS - evaluation/report.py
# =============================================================================
# Metric records (one JSON object per line in metrics.jsonl), the plain-text
# summary table and the mean/std aggregation over repeated seeded runs.
# =============================================================================

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from telemetry import json_default

METRICS_FILE = "metrics.jsonl"
SUMMARY_ORDER = (
    "ate_tracking", "ate_refined", "accuracy", "completion", "recall", "psnr", "ssim",
    "nvs_psnr", "nvs_ssim",
)


def write_records(records, path):
    """Append metric records to a JSON-lines file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for record in records:
            fh.write(json.dumps(record, default=json_default, sort_keys=True) + "\n")


def read_records(path):
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


def flatten_metrics(metrics):
    """Merge {"name": {..}} groups into one flat {key: float} row."""
    row = {}
    for key, value in metrics.items():
        if isinstance(value, dict):
            row.update({k: v for k, v in value.items() if isinstance(v, (int, float))})
        elif isinstance(value, (int, float)):
            row[key] = value
    return row


def _fmt(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def summary_table(rows, columns=None, label="run"):
    """
    Fixed-width table; one row per dict, missing cells shown as '-'.

    Args:
        rows: list of dicts; the `label` key names the row.
    """
    if columns is None:
        present = {k for row in rows for k in row if k != label}
        columns = [c for c in SUMMARY_ORDER if c in present]
        columns += sorted(present - set(columns))
    header = [label, *columns]
    cells = [[_fmt(row.get(c)) for c in header] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def aggregate_seeds(runs):
    """
    Mean and standard deviation of every numeric key over repeated runs.

    Returns:
        {key: {"mean": m, "std": s, "runs": n}}
    """
    keys = sorted({k for run in runs for k, v in run.items() if isinstance(v, (int, float))})
    out = {}
    for key in keys:
        values = np.array([run[key] for run in runs if isinstance(run.get(key), (int, float))], dtype=np.float64)
        values = values[np.isfinite(values)]
        if values.size == 0:
            continue
        out[key] = {"mean": float(values.mean()), "std": float(values.std()), "runs": int(values.size)}
    return out
