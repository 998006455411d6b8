"""Random depth-slab selection shared by the generator, real crops and the encoder.

Offsets live on the embedding grid and are scaled to voxel space, so a slab
``A[r:r+c]`` of the embedding always lines up with voxels ``[r*s, (r+c)*s)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class GridGeometry:
    full_shape: tuple[int, int, int]
    embed_shape: tuple[int, int, int]
    scale: int
    extent: int  # slab depth in embedding units

    def __post_init__(self):
        D, H, W = self.full_shape
        d, h, w = self.embed_shape
        s = self.scale
        if s < 2:
            raise GeometryError(f"scale factor must be >= 2, got {s}")
        if (D, H, W) != (s * d, s * h, s * w):
            raise GeometryError(f"full shape {self.full_shape} != {s} x {self.embed_shape}")
        if not 1 <= self.extent <= d:
            raise GeometryError(f"sub-extent {self.extent} outside [1, {d}]")

    @classmethod
    def for_resolution(cls, resolution: int, scale: int = 4, extent: int | None = None):
        """Cubic geometry; default extent is a quarter of the embedding depth."""
        if resolution % scale:
            raise GeometryError(f"resolution {resolution} not divisible by scale {scale}")
        d = resolution // scale
        if extent is None:
            extent = max(1, d // 4)
        return cls((resolution,) * 3, (d,) * 3, scale, extent)

    @property
    def n_offsets(self) -> int:
        return self.embed_shape[0] - self.extent + 1


@dataclass(frozen=True)
class SubVolumeSelector:
    offset: int
    geometry: GridGeometry

    def __post_init__(self):
        if not 0 <= self.offset <= self.geometry.embed_shape[0] - self.geometry.extent:
            raise GeometryError(f"offset {self.offset} out of range for {self.geometry}")

    @property
    def embed_window(self) -> tuple[int, int]:
        return self.offset, self.offset + self.geometry.extent

    @property
    def voxel_window(self) -> tuple[int, int]:
        s = self.geometry.scale
        lo, hi = self.embed_window
        return lo * s, hi * s


def sample_offset(geometry: GridGeometry, rng: np.random.Generator) -> SubVolumeSelector:
    """Draw r uniformly from {0, ..., d - c}."""
    if geometry.extent > geometry.embed_shape[0]:
        raise GeometryError("sub-extent larger than embedding depth")
    r = int(rng.integers(0, geometry.n_offsets))
    return SubVolumeSelector(r, geometry)


def tiling_selectors(geometry: GridGeometry) -> list[SubVolumeSelector]:
    """Disjoint selectors at stride c covering the whole depth; c must divide d."""
    d, c = geometry.embed_shape[0], geometry.extent
    if d % c:
        raise GeometryError(f"sub-extent {c} does not divide embedding depth {d}")
    return [SubVolumeSelector(r, geometry) for r in range(0, d, c)]


def _slab(arr, axis: int, lo: int, hi: int):
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(lo, hi)
    out = arr[tuple(idx)]
    # copy semantics at the interface; works for numpy arrays and torch tensors
    return out.copy() if isinstance(out, np.ndarray) else out.clone()


def extract_voxel_subvolume(v, sel: SubVolumeSelector):
    """Depth slab of a volume.

    Accepts a :class:`~crfgan.volume.Volume3D`, or an array/tensor whose last
    three axes are (D, H, W) (batched / channelled tensors pass through).
    """
    from .volume import Volume3D

    g = sel.geometry
    if isinstance(v, Volume3D):
        if v.shape != g.full_shape:
            raise GeometryError(f"volume shape {v.shape} != geometry {g.full_shape}")
        lo, hi = sel.voxel_window
        return Volume3D(v.voxels[lo:hi].copy())
    if tuple(v.shape[-3:]) != g.full_shape:
        raise GeometryError(f"volume shape {tuple(v.shape[-3:])} != geometry {g.full_shape}")
    lo, hi = sel.voxel_window
    return _slab(v, v.ndim - 3, lo, hi)


def extract_embedding_subset(a, sel: SubVolumeSelector):
    """Depth slab of an embedding grid (..., C, d, h, w)."""
    g = sel.geometry
    if tuple(a.shape[-3:]) != g.embed_shape:
        raise GeometryError(f"embedding shape {tuple(a.shape[-3:])} != geometry {g.embed_shape}")
    lo, hi = sel.embed_window
    return _slab(a, a.ndim - 3, lo, hi)
