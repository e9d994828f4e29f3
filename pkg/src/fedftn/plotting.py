"""Grouped bar charts of per-site, per-level metrics, written as SVG."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABELS = {"psnr": "PSNR (dB)", "nmse": "NMSE", "ssim": "SSIM"}


def bar_chart(values: dict, metric: str, path) -> None:
    """``values`` maps run_id -> {(site, level): value}; one bar group per (site, level)."""
    runs = list(values)
    groups = sorted({g for v in values.values() for g in v})
    x = np.arange(len(groups))
    width = 0.8 / max(len(runs), 1)
    with plt.rc_context({"svg.hashsalt": "fedftn", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(groups) + 1.5), 3.2))
        for i, run in enumerate(runs):
            heights = [values[run].get(g, np.nan) for g in groups]
            ax.bar(x + (i - (len(runs) - 1) / 2) * width, heights, width, label=run)
        ax.set_xticks(x)
        ax.set_xticklabels([f"S{s}\n{d * 100:g}%" for s, d in groups], fontsize=8)
        ax.set_ylabel(LABELS.get(metric, metric))
        if metric == "psnr":
            finite = [v for r in runs for v in values[r].values() if np.isfinite(v)]
            if finite:
                ax.set_ylim(min(finite) - 1.0, max(finite) + 0.5)
        ax.legend(fontsize=7, frameon=False)
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
