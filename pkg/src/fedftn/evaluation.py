"""Whole-volume inference and metric tables."""
from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

from .metrics import nmse, psnr, ssim

CSV_COLUMNS = ("run_id", "epoch", "site", "split", "count_level", "psnr", "nmse", "ssim",
               "recon_loss", "gwc_loss")
METRICS = ("psnr", "nmse", "ssim")


def predict(model, x: np.ndarray, d: float) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    out = model.forward(x[None, None], d).data[0, 0]
    return out.astype(np.float64)


def dataset_recon_loss(model, samples: Iterable) -> float:
    """Mean whole-volume squared error over ``samples``, without augmentation."""
    losses = [np.mean((predict(model, s.x, s.d) - np.asarray(s.y, np.float64)) ** 2) for s in samples]
    return float(np.mean(losses))


def sample_record(model, sample) -> dict:
    """Metrics of one sample; a ``None`` model scores the raw low-count input."""
    pred = np.asarray(sample.x, np.float64) if model is None else predict(model, sample.x, sample.d)
    ref = np.asarray(sample.y, np.float64)
    return {
        "site": sample.site_id,
        "subject": sample.subject_id,
        "count_level": float(sample.d),
        "psnr": psnr(pred, ref),
        "nmse": nmse(pred, ref),
        "ssim": ssim(pred, ref),
        "recon_loss": float(np.mean((pred - ref) ** 2)),
    }


def evaluate_samples(model, samples: Iterable) -> list:
    return [sample_record(model, s) for s in samples]


def level_means(records: Sequence[dict]) -> dict:
    """``count_level -> {metric: mean}`` over per-sample records."""
    groups = defaultdict(list)
    for r in records:
        groups[r["count_level"]].append(r)
    return {d: {k: float(np.mean([r[k] for r in rs])) for k in METRICS + ("recon_loss",)}
            for d, rs in sorted(groups.items())}


def summarize(records: Sequence[dict], keys=("site", "count_level")) -> list:
    """Mean and population std of each metric per group, sorted by group key."""
    groups = defaultdict(list)
    for r in records:
        groups[tuple(r[k] for k in keys)].append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        row = dict(zip(keys, key))
        row["n"] = len(rs)
        for m in METRICS:
            vals = np.array([r[m] for r in rs], dtype=np.float64)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        out.append(row)
    return out


def format_table(summary: Sequence[dict]) -> str:
    lines = [f"{'site':>4} {'level':>6} {'n':>3}  {'PSNR (dB)':>16}  {'NMSE':>18}  {'SSIM':>16}"]
    for r in summary:
        lines.append(
            f"{r['site']:>4} {r['count_level']:>6.3f} {r['n']:>3}  "
            f"{r['psnr_mean']:>8.3f} ± {r['psnr_std']:<5.3f}  "
            f"{r['nmse_mean']:>9.5f} ± {r['nmse_std']:<7.5f}  "
            f"{r['ssim_mean']:>7.4f} ± {r['ssim_std']:<6.4f}")
    return "\n".join(lines)


def fmt(value) -> str:
    """Stable text form for CSV cells."""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)
