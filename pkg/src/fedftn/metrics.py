"""Image quality metrics against a full-count reference volume.

* PSNR uses the reference maximum as peak and is capped at 99 dB for a
  perfect prediction.
* NMSE is ``||pred - ref||^2 / ||ref||^2``.
* SSIM is the mean of the standard index over every fully contained 7x7x7
  uniform window, with K1 = 0.01, K2 = 0.03 and dynamic range
  ``max(ref) - min(ref)``.  Window statistics use population (1/N) moments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    nmse: float
    ssim: float
    site_id: int = 0
    count_level: float = 0.0
    subject_id: int = 0


def _pair(pred, ref) -> tuple:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    return pred, ref


def psnr(pred, ref) -> float:
    pred, ref = _pair(pred, ref)
    peak = ref.max()
    if not np.any(ref):
        raise DomainError("PSNR is undefined for an all-zero reference")
    err = np.mean((pred - ref) ** 2)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / err)))


def nmse(pred, ref) -> float:
    pred, ref = _pair(pred, ref)
    denom = np.sum(ref ** 2)
    if denom == 0:
        raise DomainError("NMSE is undefined for a zero-norm reference")
    return float(np.sum((pred - ref) ** 2) / denom)


def _window_means(vol: np.ndarray, size: int) -> np.ndarray:
    """Means over every fully contained ``size``-cube window."""
    filtered = ndimage.uniform_filter(vol, size=size, mode="constant")
    lo = size // 2
    hi = size - 1 - lo
    return filtered[tuple(slice(lo, n - hi) for n in vol.shape)]


def ssim(pred, ref, data_range: Optional[float] = None, window: int = SSIM_WINDOW) -> float:
    pred, ref = _pair(pred, ref)
    if pred.ndim != 3:
        raise ShapeError(f"ssim expects 3D volumes, got shape {pred.shape}")
    if min(pred.shape) < window:
        raise ShapeError(f"volume {pred.shape} is smaller than the {window}^3 window")
    L = ref.max() - ref.min() if data_range is None else float(data_range)
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    mu_p, mu_r = _window_means(pred, window), _window_means(ref, window)
    var_p = _window_means(pred * pred, window) - mu_p * mu_p
    var_r = _window_means(ref * ref, window) - mu_r * mu_r
    cov = _window_means(pred * ref, window) - mu_p * mu_r
    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p * mu_p + mu_r * mu_r + c1) * (var_p + var_r + c2)
    if np.any(den == 0):
        raise DomainError("SSIM is undefined for a constant reference with zero dynamic range")
    return float(np.mean(num / den))


def evaluate_pair(pred, ref, site_id: int = 0, count_level: float = 0.0,
                  subject_id: int = 0) -> MetricReport:
    return MetricReport(psnr(pred, ref), nmse(pred, ref), ssim(pred, ref),
                        site_id, count_level, subject_id)
