"""Reconstruction-quality metrics on magnitude and phase channels.

Phase images are compared as wrapped angles shifted by +pi into (0, 2*pi]
with a fixed peak of 2*pi; magnitude images use the ground-truth maximum
as the peak. No phase unwrapping is attempted.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .fields import ComplexField

PHASE_PEAK = 2.0 * np.pi


def _pair(est, gt):
    a = np.asarray(est, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(est, gt, peak: float) -> float:
    """10*log10(peak^2 / MSE); +inf when the arrays match exactly."""
    a, b = _pair(est, gt)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def mae(est, gt) -> float:
    a, b = _pair(est, gt)
    return float(np.mean(np.abs(a - b)))


def ssim(est, gt, peak: float, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over valid windows, uniform window weighting.

    Window statistics are population moments (divide by window area), and
    only fully interior windows contribute.
    """
    a, b = _pair(est, gt)
    if a.ndim != 2:
        raise ConfigurationError(f"ssim expects 2-D arrays, got shape {a.shape}")
    if min(a.shape) < window:
        raise ConfigurationError(f"image {a.shape} smaller than ssim window {window}")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def phase_channel(field: ComplexField) -> np.ndarray:
    """Wrapped angle shifted into (0, 2*pi]."""
    return field.phase() + np.pi


def phase_psnr(est: ComplexField, gt: ComplexField) -> float:
    return psnr(phase_channel(est), phase_channel(gt), PHASE_PEAK)


def magnitude_psnr(est: ComplexField, gt: ComplexField) -> float:
    return psnr(est.magnitude(), gt.magnitude(), float(np.max(gt.magnitude())))
