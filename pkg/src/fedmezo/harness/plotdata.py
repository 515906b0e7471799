"""Tidy per-round CSV (round, series, mean, band_lo, band_hi) from metrics files."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy import stats

from .runner import METRICS_FILE, read_metrics

PLOT_FILE = "plot_data.csv"
CONFIDENCE = 0.90


def band(values, confidence: float = CONFIDENCE) -> tuple[float, float, float]:
    """Mean and two-sided Student-t interval across replicates; one value collapses the band."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        raise ValueError("no finite values")
    m = float(v.mean())
    if v.size == 1:
        return m, m, m
    half = float(stats.t.ppf(0.5 + confidence / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size))
    return m, m - half, m + half


def _series_from_metrics(rows, series):
    by_round = defaultdict(list)
    for row in rows:
        by_round[row["t"]].append(row["eval_loss"])
    return {(t, series): vals for t, vals in by_round.items()}


def collect(metrics_dir) -> dict:
    """``{(round, series): [per-replicate values]}`` for a run dir or a sweep dir."""
    root = Path(metrics_dir)
    if (root / METRICS_FILE).exists():
        sources = [(root, "eval_loss")]
    else:
        sweep = root / "sweep.json"
        names = json.loads(sweep.read_text())["status"] if sweep.exists() else None
        subdirs = sorted(p for p in root.iterdir() if (p / METRICS_FILE).exists()) if root.is_dir() else []
        if names is not None:
            subdirs = [root / n for n in names if (root / n / METRICS_FILE).exists()]
        sources = [(p, p.name) for p in subdirs]
    out = {}
    for path, series in sources:
        out.update(_series_from_metrics(read_metrics(path), series))
    if not out:
        raise ValueError(f"no metrics found under {root}")
    return out


def emit_plot_data(metrics_dir, out_path=None) -> Path:
    data = collect(metrics_dir)
    out_path = Path(out_path) if out_path else Path(metrics_dir) / PLOT_FILE
    order = []
    for (t, s) in data:
        if s not in order:
            order.append(s)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "series", "mean", "band_lo", "band_hi"])
        for s in order:
            for t in sorted(tt for tt, ss in data if ss == s):
                vals = [v for v in data[(t, s)] if v is not None]
                if not vals:
                    continue  # every replicate had diverged by this round
                w.writerow([t, s, *band(vals)])
    return out_path
