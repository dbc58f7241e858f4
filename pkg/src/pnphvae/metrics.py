"""Image quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import ImageGrid

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_BANDWIDTH = 1.5


def _pair(a, b):
    a = a.as_array() if isinstance(a, ImageGrid) else np.asarray(a, dtype=float)
    b = b.as_array() if isinstance(b, ImageGrid) else np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` for equal images."""
    if not peak > 0:
        raise ValueError("peak must be > 0")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


@dataclass(frozen=True)
class SsimResult:
    value: float
    global_fallback: bool  # image smaller than the window


def _gauss_window(n: int, sigma: float) -> np.ndarray:
    t = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-0.5 * (t / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-covered positions."""
    n = w.size
    rows = sum(w[k] * img[k:img.shape[0] - n + 1 + k, :] for k in range(n))
    return sum(w[k] * rows[:, k:rows.shape[1] - n + 1 + k] for k in range(n))


def _ssim_channel(a, b, peak, n, sigma):
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    if min(a.shape) < n:
        ma, mb = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = np.mean((a - ma) * (b - mb))
        return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)), True
    w = _gauss_window(n, sigma)
    filt = lambda img: _filter_valid(img, w)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    # unbiased covariance, matching the usual Gaussian-weighted SSIM
    corr = n * n / (n * n - 1.0)
    va = corr * (filt(a * a) - mu_a**2)
    vb = corr * (filt(b * b) - mu_b**2)
    cov = corr * (filt(a * b) - mu_a * mu_b)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return float(s.mean()), False


def ssim_report(a, b, peak: float = 1.0) -> SsimResult:
    """Windowed SSIM averaged over valid window positions and over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals, flags = [], []
    for c in range(a.shape[2]):
        v, f = _ssim_channel(a[..., c], b[..., c], peak, SSIM_WINDOW, SSIM_BANDWIDTH)
        vals.append(v)
        flags.append(f)
    return SsimResult(float(np.mean(vals)), any(flags))


def ssim(a, b, peak: float = 1.0) -> float:
    return ssim_report(a, b, peak).value
