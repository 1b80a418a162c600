"""PNG output for band images and per-pixel spectra."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .spectral_data import SpectralCube  # noqa: E402


def plot_bands(cube: SpectralCube, bands: Sequence[int], out_dir, prefix: str = "band") -> list[Path]:
    """One grayscale PNG per requested band, pixel-for-pixel, on a fixed [0, 1] scale."""
    out = Path(out_dir)
    for n in bands:
        if not 0 <= n < cube.bands:
            raise IndexError(f"band {n} out of range for a {cube.bands}-band cube")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n in bands:
        path = out / f"{prefix}_{n:02d}.png"
        plt.imsave(path, np.clip(cube.data[n], 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)
        paths.append(path)
    return paths


def plot_spectra(cube: SpectralCube, pixel: tuple[int, int], out_path, wavelengths=None) -> np.ndarray:
    """Plot the spectrum at ``pixel = (row, col)``; returns the plotted curve."""
    r, c = pixel
    if not (0 <= r < cube.height and 0 <= c < cube.width):
        raise IndexError(f"pixel {pixel} outside {cube.height}x{cube.width}")
    curve = np.array(cube.data[:, r, c], dtype=np.float64)
    x = np.arange(cube.bands) if wavelengths is None else np.asarray(wavelengths)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(x, curve, marker="o")
    ax.set_xlabel("band" if wavelengths is None else "wavelength (nm)")
    ax.set_ylabel("intensity")
    ax.set_title(f"pixel ({r}, {c})")
    fig.tight_layout()
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return curve
