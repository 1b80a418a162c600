"""Hyperspectral data model, HSC1 cube files, synthetic scenes and augmentation.

Cubes are stored band-major: ``data[band, row, col]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CUBE_MAGIC = b"HSC1"
MASK_MAGIC = b"MSK1"
HEADER_SIZE = 16
# Refuse headers that would describe more than 2**31 voxels.
MAX_VOXELS = 2**31


class FormatError(ValueError):
    """Raised when a cube or mask file does not follow the HSC1 layout."""


def _frozen(array, ndim: int, name: str) -> np.ndarray:
    arr = np.array(array, dtype=np.float32, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """A hyperspectral cube with ``data`` of shape (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3, "cube data"))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class CodedMask:
    """Coded aperture transmission, shape (height, width), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data, 2, "mask data")
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, CodedMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class SceneMeta:
    wavelengths: tuple[float, ...]
    center_index: int = 0

    def __post_init__(self):
        wl = tuple(float(w) for w in self.wavelengths)
        if not wl:
            raise ValueError("at least one wavelength required")
        if any(b <= a for a, b in zip(wl, wl[1:])):
            raise ValueError("wavelengths must be strictly increasing")
        if not 0 <= self.center_index < len(wl):
            raise ValueError(f"center_index {self.center_index} outside [0, {len(wl)})")
        object.__setattr__(self, "wavelengths", wl)


@dataclass(frozen=True)
class Sample:
    """One training or test item: ground-truth cube, its mask and a seed."""

    cube: SpectralCube
    mask: CodedMask
    seed: int = 0


@dataclass(frozen=True)
class ManifestEntry:
    cube: Path
    mask: Path
    seed: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def load_samples(self) -> list[Sample]:
        samples = [Sample(load_cube(e.cube), load_mask(e.mask), e.seed) for e in self.entries]
        bands = {s.cube.bands for s in samples}
        if len(bands) > 1:
            raise ValueError(f"manifest cubes disagree on band count: {sorted(bands)}")
        return samples


# ---------------------------------------------------------------------------
# HSC1 / MSK1 files
# ---------------------------------------------------------------------------


def _write(path, magic: bytes, data: np.ndarray) -> None:
    bands, height, width = data.shape
    header = magic + struct.pack("<III", height, width, bands)
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _read(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    height, width, bands = struct.unpack("<III", raw[4:HEADER_SIZE])
    count = height * width * bands
    if count == 0:
        raise FormatError(f"{path}: zero-sized dimension in header ({height}, {width}, {bands})")
    if count > MAX_VOXELS:
        raise FormatError(f"{path}: header dimensions ({height}, {width}, {bands}) overflow")
    expected = HEADER_SIZE + 4 * count
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=HEADER_SIZE)
    return data.reshape(bands, height, width).astype(np.float32)


def save_cube(cube: SpectralCube, path) -> None:
    _write(path, CUBE_MAGIC, cube.data)


def load_cube(path) -> SpectralCube:
    return SpectralCube(_read(path, CUBE_MAGIC))


def save_mask(mask: CodedMask, path) -> None:
    _write(path, MASK_MAGIC, mask.data[None])


def load_mask(path) -> CodedMask:
    data = _read(path, MASK_MAGIC)
    if data.shape[0] != 1:
        raise FormatError(f"{path}: mask files must declare L=1, got {data.shape[0]}")
    return CodedMask(data[0])


def save_manifest(entries: Sequence[ManifestEntry], path) -> None:
    path = Path(path)
    rows = []
    for e in entries:
        cube, mask = Path(e.cube), Path(e.mask)
        try:
            cube, mask = cube.relative_to(path.parent), mask.relative_to(path.parent)
        except ValueError:
            pass
        rows.append({"cube": cube.as_posix(), "mask": mask.as_posix(), "seed": int(e.seed)})
    path.write_text(json.dumps(rows, indent=2) + "\n")


def load_manifest(path, split: str = "train") -> DatasetManifest:
    """Read a JSON manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    rows = json.loads(path.read_text())
    if not isinstance(rows, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    entries = []
    for i, row in enumerate(rows):
        try:
            cube, mask, seed = Path(row["cube"]), Path(row["mask"]), int(row["seed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: entry {i} malformed: {exc}") from exc
        cube = cube if cube.is_absolute() else path.parent / cube
        mask = mask if mask.is_absolute() else path.parent / mask
        for p in (cube, mask):
            if not p.exists():
                raise FileNotFoundError(f"{path}: entry {i} references missing file {p}")
        entries.append(ManifestEntry(cube, mask, seed))
    return DatasetManifest(tuple(entries), split)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _smooth_spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    u = np.linspace(0.0, 1.0, bands) if bands > 1 else np.zeros(1)
    spec = np.full(bands, rng.uniform(0.05, 0.2))
    for _ in range(rng.integers(1, 4)):
        centre = rng.uniform(-0.1, 1.1)
        width = rng.uniform(0.5, 1.0)
        spec += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((u - centre) / width) ** 2)
    return spec / spec.max()


ILLUM_TILT = 1.2
ILLUM_CURVE = 0.3


def _stripes(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, base: float) -> np.ndarray:
    """Oriented sinusoidal texture with a 3-8 px period, range [2 base - 1, 1]."""
    period = rng.uniform(3.0, 8.0)
    phi = rng.uniform(0, np.pi)
    phase = 2 * np.pi * (yy * np.cos(phi) + xx * np.sin(phi)) / period
    return base + (1 - base) * np.sin(phase + rng.uniform(0, 2 * np.pi))


def synthesize_scene(seed: int, height: int, width: int, bands: int) -> SpectralCube:
    """Piecewise-smooth synthetic scene: textured soft-edged blobs over a shaded
    background, each region carrying its own smooth spectrum, all lit by one
    smooth per-scene illuminant."""
    if min(height, width, bands) < 8:
        raise ValueError("synthesize_scene needs height, width and bands >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    scale = float(min(height, width))

    gy, gx = rng.uniform(-1, 1, 2)
    shading = 0.7 + 0.3 * (gy * (yy / height - 0.5) + gx * (xx / width - 0.5))
    shading = shading * _stripes(rng, yy, xx, 0.5)
    cube = 0.6 * _smooth_spectrum(rng, bands)[:, None, None] * shading[None]

    for _ in range(rng.integers(5, 10)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(0.1, 0.35, 2) * scale
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(theta) + dx * np.sin(theta)) / ry
        v = (-dy * np.sin(theta) + dx * np.cos(theta)) / rx
        # Soft edge about one pixel wide.
        edge = (1.0 - np.sqrt(u**2 + v**2)) * min(ry, rx)
        alpha = 1.0 / (1.0 + np.exp(-2.0 * edge))

        texture = _stripes(rng, yy, xx, 0.5)

        region = rng.uniform(0.4, 1.0) * _smooth_spectrum(rng, bands)[:, None, None] * texture[None]
        cube = (1 - alpha[None]) * cube + alpha[None] * region

    # Scene-wide illuminant: a smooth log-quadratic tilt shared by every pixel.
    u = np.linspace(-0.5, 0.5, bands)
    illum = np.exp(rng.uniform(-1, 1) * ILLUM_TILT * u + rng.uniform(-1, 1) * ILLUM_CURVE * 4 * u**2)
    cube = cube * (illum / illum.max())[:, None, None]

    return SpectralCube(np.clip(cube, 0.0, 1.0))


def random_mask(seed: int, height: int, width: int) -> CodedMask:
    """I.i.d. Bernoulli(0.5) binary coded aperture."""
    if height < 1 or width < 1:
        raise ValueError("mask dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    return CodedMask(rng.integers(0, 2, size=(height, width)).astype(np.float32))


# ---------------------------------------------------------------------------
# Augmentation and cropping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    """Dihedral transform: optional flips followed by ``k`` quarter turns."""

    k: int = 0
    hflip: bool = False
    vflip: bool = False

    def apply(self, array: np.ndarray) -> np.ndarray:
        """Apply to the last two axes of ``array``."""
        out = array
        if self.hflip:
            out = out[..., :, ::-1]
        if self.vflip:
            out = out[..., ::-1, :]
        if self.k % 4:
            out = np.rot90(out, self.k % 4, axes=(-2, -1))
        return np.ascontiguousarray(out)


def apply_transform(cube: SpectralCube, mask: CodedMask, transform: Transform):
    if transform.k % 2 and cube.height != cube.width:
        raise ValueError(f"rotation needs a square cube, got {cube.height}x{cube.width}")
    _check_aligned(cube, mask)
    return SpectralCube(transform.apply(cube.data)), CodedMask(transform.apply(mask.data))


def draw_transform(seed: int, rotate: bool = True) -> Transform:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, 4)) if rotate else 0
    hflip, vflip = (bool(b) for b in rng.integers(0, 2, size=2))
    return Transform(k, hflip, vflip)


def augment(cube: SpectralCube, mask: CodedMask, seed: int, rotate: bool = True):
    """Random flip/rotation applied identically to every band and the mask."""
    if rotate and cube.height != cube.width:
        raise ValueError(f"rotation needs a square cube, got {cube.height}x{cube.width}")
    return apply_transform(cube, mask, draw_transform(seed, rotate))


def crop_block(cube: SpectralCube, mask: CodedMask, size: int, seed: int):
    """Aligned random ``size`` x ``size`` crop of cube and mask."""
    _check_aligned(cube, mask)
    if size < 1 or size > min(cube.height, cube.width):
        raise ValueError(f"block size {size} does not fit a {cube.height}x{cube.width} cube")
    top, left = crop_offset(cube.height, cube.width, size, seed)
    window = (slice(top, top + size), slice(left, left + size))
    return SpectralCube(cube.data[(slice(None), *window)]), CodedMask(mask.data[window])


def crop_offset(cube_height: int, cube_width: int, size: int, seed: int) -> tuple[int, int]:
    """The (top, left) corner ``crop_block`` picks for these arguments."""
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, cube_height - size + 1)), int(rng.integers(0, cube_width - size + 1))


def _check_aligned(cube: SpectralCube, mask: CodedMask) -> None:
    if (cube.height, cube.width) != (mask.height, mask.width):
        raise ValueError(
            f"mask {mask.height}x{mask.width} does not match cube {cube.height}x{cube.width}"
        )
