"""Volume container, raw+sidecar I/O, intensity normalization and phantoms."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, IntegrityError, ParameterError

INTENSITY_RANGE = (-1.0, 1.0)
META_SUFFIX = ".meta.json"


@dataclass
class Volume3D:
    """Single-channel float32 voxel grid, shape (depth, height, width)."""

    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ParameterError(f"volume must be a non-empty 3D array, got shape {v.shape}")
        self.voxels = np.ascontiguousarray(v, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.voxels.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return self.shape == other.shape and self.voxels.tobytes() == other.voxels.tobytes()


@dataclass
class VolumeMeta:
    shape: tuple[int, int, int]
    dtype: str = "float32"
    byte_order: str = "little-endian"
    layout: str = "row-major"
    intensity_range: tuple[float, float] = INTENSITY_RANGE

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "dtype": self.dtype,
            "byte_order": self.byte_order,
            "layout": self.layout,
            "intensity_range": list(self.intensity_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeMeta":
        try:
            shape = tuple(int(s) for s in d["shape"])
            meta = cls(
                shape=shape,
                dtype=str(d["dtype"]),
                byte_order=str(d["byte_order"]),
                layout=str(d["layout"]),
                intensity_range=tuple(float(x) for x in d["intensity_range"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed volume metadata: {exc}") from exc
        if len(meta.shape) != 3 or min(meta.shape) < 1:
            raise FormatError(f"bad shape in metadata: {meta.shape}")
        if (meta.dtype, meta.byte_order, meta.layout) != ("float32", "little-endian", "row-major"):
            raise FormatError(
                f"unsupported encoding {meta.dtype}/{meta.byte_order}/{meta.layout}"
            )
        return meta


def meta_path_for(path: str | os.PathLike) -> Path:
    """``vol.raw`` -> ``vol.meta.json`` (the sidecar lives next to the raw file)."""
    p = Path(path)
    return p.with_name(p.stem + META_SUFFIX) if p.suffix else p.with_name(p.name + META_SUFFIX)


def save_volume(v: Volume3D, path: str | os.PathLike) -> None:
    path = Path(path)
    raw = v.voxels.astype("<f4", copy=False).tobytes(order="C")
    meta = VolumeMeta(shape=v.shape)
    _atomic_write(path, raw)
    _atomic_write(meta_path_for(path), json.dumps(meta.to_dict(), indent=2).encode())


def load_volume(path: str | os.PathLike) -> Volume3D:
    path = Path(path)
    mpath = meta_path_for(path)
    try:
        meta = VolumeMeta.from_dict(json.loads(mpath.read_text()))
    except FileNotFoundError as exc:
        raise FormatError(f"missing sidecar {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar {mpath}: {exc}") from exc
    raw = path.read_bytes()
    expected = int(np.prod(meta.shape)) * 4
    if len(raw) != expected:
        raise IntegrityError(
            f"{path}: {len(raw)} bytes on disk, metadata shape {meta.shape} needs {expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(meta.shape)
    return Volume3D(arr.astype(np.float32))


def list_volumes(directory: str | os.PathLike) -> list[Path]:
    """Raw files in ``directory`` that have a sidecar, sorted by name."""
    d = Path(directory)
    return sorted(p for p in d.glob("*.raw") if meta_path_for(p).exists())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def normalize_intensity(raw, lo: float, hi: float) -> Volume3D:
    """Affine map of [lo, hi] onto [-1, 1]; values outside are clamped."""
    if not lo < hi:
        raise ParameterError(f"need lo < hi, got lo={lo}, hi={hi}")
    a = np.asarray(raw, dtype=np.float64)
    out = (a - lo) * (2.0 / (hi - lo)) - 1.0
    return Volume3D(np.clip(out, -1.0, 1.0).astype(np.float32))


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_ellipsoids: int = 3
    # semi-axis length as a fraction of the extent along that axis
    radius_range: tuple[float, float] = (0.12, 0.3)
    intensity_levels: Sequence[float] = (0.0, 0.5, 1.0)
    background: float = -1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_ellipsoids < 1:
            raise ParameterError("n_ellipsoids must be >= 1")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ParameterError(f"bad phantom shape {self.shape}")
        lo, hi = self.radius_range
        if lo < 0 or hi < lo:
            raise ParameterError(f"bad radius range {self.radius_range}")
        if hi > 1.0:
            raise ParameterError(f"radius fraction {hi} exceeds the volume extent")
        if not self.intensity_levels:
            raise ParameterError("need at least one intensity level")
        for x in list(self.intensity_levels) + [self.background]:
            if not -1.0 <= x <= 1.0:
                raise ParameterError(f"intensity {x} outside [-1, 1]")


@dataclass
class EllipsoidLayout:
    centers: np.ndarray  # (n, 3) voxel coordinates
    radii: np.ndarray  # (n, 3) voxels
    intensities: np.ndarray  # (n,)


def phantom_layout(spec: PhantomSpec) -> EllipsoidLayout:
    """Draw ellipsoid centers, semi-axes and intensities for ``spec``.

    Centers are uniform over the continuous box [0, extent) per axis, so
    ellipsoids near the border are clipped by the volume.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_ellipsoids
    extent = np.asarray(spec.shape, dtype=np.float64)
    centers = rng.uniform(0.0, 1.0, size=(n, 3)) * extent
    lo, hi = spec.radius_range
    radii = rng.uniform(lo, hi, size=(n, 3)) * extent
    levels = np.asarray(spec.intensity_levels, dtype=np.float64)
    intensities = levels[rng.integers(0, len(levels), size=n)]
    return EllipsoidLayout(centers, radii, intensities)


def make_phantom(spec: PhantomSpec) -> Volume3D:
    layout = phantom_layout(spec)
    vol = np.full(spec.shape, spec.background, dtype=np.float64)
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) + 0.5 for s in spec.shape), indexing="ij")
    for c, r, level in zip(layout.centers, layout.radii, layout.intensities):
        if np.any(r <= 0):
            continue
        rho = np.sqrt(sum(((g - ci) / ri) ** 2 for g, ci, ri in zip(grids, c, r)))
        # signed distance to the surface, approximated in voxels along the shortest axis
        sd = (rho - 1.0) * r.min()
        alpha = np.clip(0.5 - sd, 0.0, 1.0)
        vol = vol * (1.0 - alpha) + level * alpha
    return Volume3D(np.clip(vol, -1.0, 1.0).astype(np.float32))


def write_phantom_dataset(out_dir, count: int, size: int, seed: int, **spec_kw) -> list[Path]:
    """Write ``count`` phantoms; phantom i uses seed ``seed * 1_000_003 + i``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        spec = PhantomSpec(shape=(size, size, size), seed=seed * 1_000_003 + i, **spec_kw)
        p = out / f"phantom_{i:05d}.raw"
        save_volume(make_phantom(spec), p)
        paths.append(p)
    return paths
