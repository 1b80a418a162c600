"""CASSI forward model and shift-back initialisation.

Band ``n`` lands on the detector ``step_d * (n - center_index)`` columns away
from the reference band. The detector frame starts at the leftmost sheared
band, so column ``j`` of a measurement holds physical column
``j + origin`` with ``origin = -step_d * center_index``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral_data import CodedMask, SpectralCube


@dataclass(frozen=True)
class ShiftSpec:
    step_d: int = 2
    center_index: int = 0

    def __post_init__(self):
        if int(self.step_d) != self.step_d or self.step_d < 0:
            raise ValueError(f"step_d must be a non-negative integer, got {self.step_d}")
        if int(self.center_index) != self.center_index or self.center_index < 0:
            raise ValueError(f"center_index must be a non-negative integer, got {self.center_index}")

    def offsets(self, bands: int) -> np.ndarray:
        """Detector column at which each band's column 0 lands."""
        if self.center_index >= bands:
            raise ValueError(f"center_index {self.center_index} outside [0, {bands})")
        rel = self.step_d * (np.arange(bands) - self.center_index)
        return rel - rel.min()

    def measurement_width(self, width: int, bands: int) -> int:
        return width + self.step_d * (bands - 1)


@dataclass(frozen=True, eq=False)
class Measurement:
    """2-D coded snapshot, ``data`` of shape (height, width_m)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"measurement must be a non-empty 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width_m(self) -> int:
        return self.data.shape[1]


def encode(cube: SpectralCube, mask: CodedMask) -> SpectralCube:
    if (cube.height, cube.width) != (mask.height, mask.width):
        raise ValueError(
            f"mask {mask.height}x{mask.width} does not match cube {cube.height}x{cube.width}"
        )
    return SpectralCube(cube.data * mask.data[None])


def disperse_sum(encoded: SpectralCube, spec: ShiftSpec) -> Measurement:
    bands, height, width = encoded.data.shape
    out = np.zeros((height, spec.measurement_width(width, bands)), dtype=np.float32)
    for n, off in enumerate(spec.offsets(bands)):
        out[:, off : off + width] += encoded.data[n]
    return Measurement(out)


def forward_model(cube: SpectralCube, mask: CodedMask, spec: ShiftSpec) -> Measurement:
    return disperse_sum(encode(cube, mask), spec)


def shift_back(y: Measurement, spec: ShiftSpec, bands: int) -> SpectralCube:
    """Slice one ``width``-wide window per band out of the snapshot."""
    if bands < 1:
        raise ValueError("bands must be >= 1")
    width = y.width_m - spec.step_d * (bands - 1)
    if width < 1:
        raise ValueError(
            f"measurement width {y.width_m} too small for {bands} bands at step {spec.step_d}"
        )
    windows = [y.data[:, off : off + width] for off in spec.offsets(bands)]
    return SpectralCube(np.stack(windows))

