"""PSNR and SSIM for spectral cubes."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .spectral_data import SpectralCube

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a.data if isinstance(a, SpectralCube) else a, dtype=np.float64)
    y = np.asarray(b.data if isinstance(b, SpectralCube) else b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all voxels; ``inf`` for identical inputs."""
    x, y = _arrays(a, b)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable weighted mean over every fully-contained window of the last two axes."""
    half = taps.size // 2
    out = correlate1d(img, taps, axis=-1, mode="constant")[..., half : img.shape[-1] - half]
    out = correlate1d(out, taps, axis=-2, mode="constant")[..., half : img.shape[-2] - half, :]
    return out


def ssim_map(a, b, peak: float = 1.0) -> np.ndarray:
    """Per-window SSIM, shape (bands, H - 10, W - 10) for 3-D input."""
    x, y = _arrays(a, b)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs spatial size >= {SSIM_WINDOW}, got {x.shape[-2:]}")
    taps = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    var_x = _filter_valid(x * x, taps) - mu_x**2
    var_y = _filter_valid(y * y, taps) - mu_y**2
    cov = _filter_valid(x * y, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    """Gaussian-windowed SSIM (11 taps, sigma 1.5), averaged over windows and bands."""
    return float(np.mean(ssim_map(a, b, peak)))
