"""Checkpoint files: length-prefixed binary tensor records plus a JSON manifest.

``<stem>.bin`` layout (all integers little-endian)::

    magic     8 bytes   b"CRFGANCK"
    version   uint32    1
    count     uint32    number of records
    then per record:
      name_len  uint32
      name      name_len bytes, UTF-8
      dtype     uint8     0=float32 1=float64 2=int64 3=uint8
      ndim      uint32
      dims      ndim x uint64
      nbytes    uint64
      data      nbytes bytes, C order

``<stem>.manifest.json`` lists each record's name, dtype, shape, data offset
and size, the graph fingerprint, and free-form JSON state (config, iteration,
optimizer hyper-parameters, RNG state).
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"CRFGANCK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
DTYPE_CODES = {v.str: k for k, v in DTYPES.items()}
DTYPE_NAMES = {0: "float32", 1: "float64", 2: "int64", 3: "uint8"}


def checkpoint_paths(path: str | os.PathLike) -> tuple[Path, Path]:
    """Accept the stem, the .bin or the .manifest.json path; return (bin, manifest)."""
    p = Path(path)
    name = p.name
    for suffix in (".manifest.json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".bin"), p.with_name(name + ".manifest.json")


def _to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    a = np.asarray(t)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    target = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8",
              np.dtype(np.int64): "<i8", np.dtype(np.uint8): "u1"}.get(a.dtype)
    if target is None:
        raise FormatError(f"unsupported tensor dtype {a.dtype}")
    return np.asarray(a, dtype=target, order="C")  # ascontiguousarray would promote 0-d to 1-d


def save_checkpoint(path, tensors: dict, fingerprint: str, state: dict | None = None) -> Path:
    """Write both files atomically (temp file then rename). Returns the .bin path."""
    bin_path, man_path = checkpoint_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    offset = sum(len(c) for c in chunks)
    entries = []
    for name, t in tensors.items():
        a = _to_numpy(t)
        code = DTYPE_CODES[a.dtype.str]
        nb = name.encode("utf-8")
        header = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, a.ndim)
        header += struct.pack(f"<{a.ndim}Q", *a.shape) + struct.pack("<Q", a.nbytes)
        chunks += [header, a.tobytes()]
        offset += len(header)
        entries.append({"name": name, "dtype": DTYPE_NAMES[code], "shape": list(a.shape),
                        "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    manifest = {
        "format": "crfgan-checkpoint",
        "version": VERSION,
        "fingerprint": fingerprint,
        "tensors": entries,
        "state": state or {},
    }
    _atomic(bin_path, b"".join(chunks))
    _atomic(man_path, json.dumps(manifest, indent=1).encode())
    return bin_path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read records and manifest, cross-checking one against the other."""
    bin_path, man_path = checkpoint_paths(path)
    try:
        manifest = json.loads(man_path.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing manifest {man_path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {man_path}: {exc}") from exc
    if manifest.get("format") != "crfgan-checkpoint":
        raise FormatError(f"{man_path} is not a checkpoint manifest")
    try:
        buf = bin_path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing checkpoint data {bin_path}") from exc
    if buf[:8] != MAGIC:
        raise FormatError(f"{bin_path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 16
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            code, ndim = struct.unpack_from("<BI", buf, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if pos + nbytes > len(buf):
                raise IntegrityError(f"record {name!r} truncated")
            a = np.frombuffer(buf, dtype=DTYPES[code], count=int(np.prod(shape, dtype=np.int64)), offset=pos)
            tensors[name] = a.reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{bin_path}: malformed record ({exc})") from exc
    if pos != len(buf):
        raise IntegrityError(f"{bin_path}: {len(buf) - pos} trailing bytes")
    listed = {e["name"]: e for e in manifest.get("tensors", [])}
    if set(listed) != set(tensors):
        raise IntegrityError("manifest and data file list different tensors")
    for name, a in tensors.items():
        if list(a.shape) != listed[name]["shape"]:
            raise IntegrityError(f"shape of {name!r} disagrees with manifest")
    return tensors, manifest


def _atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
