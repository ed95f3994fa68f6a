"""PSNR and single-scale SSIM for images in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` in dB; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def ssim_map(a, b) -> np.ndarray:
    """SSIM at every position where the window fits entirely inside a 2-D image."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim_map expects a single 2-D channel")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over positions and channels. Accepts ``(H, W)`` or ``(C, H, W)``."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    if a.ndim != 3:
        raise ValueError("expected (H, W) or (C, H, W)")
    return float(np.mean([ssim_map(a[c], b[c]).mean() for c in range(a.shape[0])]))


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    runtime_per_frame: float = 0.0
    step_count: int = 0

    def add(self, out, gt):
        self.psnr.append(psnr(out, gt))
        self.ssim.append(ssim(out, gt))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def as_dict(self) -> dict:
        return {
            "psnr": self.psnr, "ssim": self.ssim, "psnr_mean": self.mean_psnr,
            "ssim_mean": self.mean_ssim, "runtime_per_frame": self.runtime_per_frame,
            "step_count": self.step_count,
        }
