"""Binary voxel microstructures: generation, measurement, sampling and I/O.

Voxel convention: 1 = solid, 0 = pore.  Arrays are indexed ``[x, y, z]``;
the on-disk byte order is x-fastest (Fortran order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .fileio import atomic_write_bytes

DEFAULT_SPACING = 1.0e-6
MAGIC = b"VXG1"
_HEADER = struct.Struct("<4s3I3dB")
MAX_VOXELS = 2**34
MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Immutable binary occupancy volume with physical spacing in meters."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (DEFAULT_SPACING,) * 3

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {v.shape}")
        if v.dtype != np.uint8:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("voxels must contain only 0 and 1")
            v = v.astype(np.uint8)
        elif v.size and v.max() > 1:
            raise ValueError("voxels must contain only 0 and 1")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        v = np.array(v, dtype=np.uint8, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    @property
    def pore_mask(self) -> np.ndarray:
        return self.voxels == 0

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None

    def rotate90_z(self) -> "VoxelGrid":
        """Rotate by +90 degrees about z: (x, y) -> (-y, x)."""
        sx, sy, sz = self.spacing
        return VoxelGrid(np.rot90(self.voxels, k=1, axes=(0, 1)), (sy, sx, sz))


@dataclass(frozen=True, eq=False)
class GrayVolume:
    """Real-valued volume in [0, 1], e.g. a decoder output before thresholding."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (DEFAULT_SPACING,) * 3

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"values must be 3D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("gray values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 100
    depth: int = 100
    pore_size: int = 10
    n_pores_min: int = 10
    n_pores_max: int = 40
    seed: int = 0
    count: int = 1
    spacing: tuple[float, float, float] = (DEFAULT_SPACING,) * 3

    def validate(self) -> None:
        for name in ("image_size", "depth", "pore_size", "count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.pore_size > self.image_size:
            raise ConfigError("pore_size exceeds image_size")
        if not 0 <= self.n_pores_min <= self.n_pores_max:
            raise ConfigError("need 0 <= n_pores_min <= n_pores_max")
        if self.n_pores_max * self.pore_size**2 > self.image_size**2:
            raise ConfigError("n_pores_max pores cannot fit without overlap")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class SyntheticSample:
    index: int
    seed: int
    n_pores: int
    grid: VoxelGrid
    corners: np.ndarray = field(repr=False)


def place_pores(rng: np.random.Generator, image_size: int, pore_size: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample ``n`` non-overlapping square pores in one slice.

    Returns the slice (1 = solid) and the (n, 2) array of top-left corners.
    Pores may share edges.  A slice is restarted after too many consecutive
    rejections for a single pore.
    """
    hi = image_size - pore_size + 1
    while True:
        occupied = np.zeros((image_size, image_size), dtype=bool)
        corners = np.zeros((n, 2), dtype=np.int64)
        ok = True
        for p in range(n):
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                r, c = rng.integers(0, hi, size=2)
                if not occupied[r : r + pore_size, c : c + pore_size].any():
                    occupied[r : r + pore_size, c : c + pore_size] = True
                    corners[p] = (r, c)
                    break
            else:
                ok = False
                break
        if ok:
            return (~occupied).astype(np.uint8), corners


def synthetic_samples(cfg: GeneratorConfig, start: int = 0) -> Iterator[SyntheticSample]:
    """Lazily yield generated samples; sample ``i`` uses seed ``cfg.seed + i``."""
    cfg.validate()
    for i in range(start, cfg.count):
        seed = (cfg.seed + i) % 2**64
        rng = np.random.default_rng(seed)
        n = int(rng.integers(cfg.n_pores_min, cfg.n_pores_max + 1))
        sl, corners = place_pores(rng, cfg.image_size, cfg.pore_size, n)
        # slices lie in the (y, z) plane and are stacked along x
        vox = np.broadcast_to(sl[None, :, :], (cfg.depth, cfg.image_size, cfg.image_size))
        yield SyntheticSample(i, seed, n, VoxelGrid(vox, cfg.spacing), corners)


def generate_synthetic(cfg: GeneratorConfig) -> list[VoxelGrid]:
    return [s.grid for s in synthetic_samples(cfg)]


def porosity(g: VoxelGrid) -> float:
    """Pore-voxel fraction n^F."""
    return float(np.count_nonzero(g.voxels == 0)) / g.voxels.size


def solidity(g: VoxelGrid) -> float:
    return float(np.count_nonzero(g.voxels)) / g.voxels.size


def subsample_origins(dims: Sequence[int], size: Sequence[int], stride: Sequence[int]) -> list[tuple[int, int, int]]:
    if len(dims) != 3 or len(size) != 3 or len(stride) != 3:
        raise ValueError("dims, size and stride must have three entries")
    if any(t < 1 for t in stride):
        raise ValueError(f"strides must be positive, got {tuple(stride)}")
    if any(s < 1 or s > d for s, d in zip(size, dims)):
        raise ValueError(f"sub-volume size {tuple(size)} does not fit in {tuple(dims)}")
    axes = [range(0, d - s + 1, t) for d, s, t in zip(dims, size, stride)]
    return [(i, j, k) for i in axes[0] for j in axes[1] for k in axes[2]]


def subsample(g: VoxelGrid, size: Sequence[int], stride: Sequence[int] | None = None) -> list[VoxelGrid]:
    """All axis-aligned sub-volumes at origins 0, t, 2t, ... that fit in ``g``.

    The default stride equals ``size`` (non-overlapping tiling).
    """
    stride = tuple(size) if stride is None else tuple(stride)
    sx, sy, sz = size
    return [
        VoxelGrid(g.voxels[i : i + sx, j : j + sy, k : k + sz], g.spacing)
        for i, j, k in subsample_origins(g.dims, size, stride)
    ]


def binarize(v: GrayVolume | np.ndarray, threshold: float = 0.5) -> VoxelGrid:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(v, GrayVolume):
        values, spacing = v.values, v.spacing
    else:
        values, spacing = np.asarray(v, dtype=np.float64), (DEFAULT_SPACING,) * 3
    return VoxelGrid((values >= threshold).astype(np.uint8), spacing)


def encode_grid(g: VoxelGrid) -> bytes:
    nx, ny, nz = g.dims
    header = _HEADER.pack(MAGIC, nx, ny, nz, *g.spacing, 1)
    return header + np.asfortranarray(g.voxels).tobytes(order="F")


def decode_grid(data: bytes) -> VoxelGrid:
    if len(data) < _HEADER.size:
        raise FormatError("truncated VXG1 header")
    magic, nx, ny, nz, dx, dy, dz, polarity = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if polarity not in (0, 1):
        raise FormatError(f"bad polarity flag {polarity}")
    n = nx * ny * nz
    if n == 0 or n > MAX_VOXELS:
        raise FormatError(f"invalid dimensions {(nx, ny, nz)}")
    body = data[_HEADER.size :]
    if len(body) != n:
        raise FormatError(f"expected {n} voxel bytes, found {len(body)}")
    vox = np.frombuffer(body, dtype=np.uint8).reshape((nx, ny, nz), order="F")
    if vox.max() > 1:
        raise FormatError("voxel bytes must be 0 or 1")
    if polarity == 0:
        vox = 1 - vox
    try:
        return VoxelGrid(vox, (dx, dy, dz))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_grid(g: VoxelGrid, path: str | Path) -> None:
    atomic_write_bytes(Path(path), encode_grid(g))


def read_grid(path: str | Path) -> VoxelGrid:
    return decode_grid(Path(path).read_bytes())
