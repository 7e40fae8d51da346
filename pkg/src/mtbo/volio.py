"""Raw volume files: JSON header plus a sibling little-endian binary.

Header fields::

    {"dims": [nx, ny, nz], "spacing": [sx, sy, sz], "dtype": "f32" | "u8",
     "order": "x-fastest", "data_file": "<name>.raw"}

``data_file`` is optional and defaults to the header name with a ``.raw``
suffix.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .discretize import IntensityVolume, VoxelMask

_DTYPES = {"f32": "<f4", "u8": "u1", "u16": "<u2"}


def _raw_path(header: Path, meta: dict) -> Path:
    name = meta.get("data_file") or header.with_suffix(".raw").name
    return header.parent / name


def write_raw(header_path, array: np.ndarray, dtype: str, spacing=(1.0, 1.0, 1.0), extra: dict | None = None) -> Path:
    """Write `array` (indexed ``[x, y, z]``) as header + x-fastest raw data."""
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".raw")
    meta = {
        "dims": [int(d) for d in array.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "order": "x-fastest",
        "data_file": raw_path.name,
    }
    if extra:
        meta.update(extra)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.asarray(array).astype(_DTYPES[dtype]).tobytes(order="F"))
    header_path.write_text(json.dumps(meta, indent=2))
    return header_path


def read_raw(header_path) -> tuple[dict, np.ndarray]:
    header_path = Path(header_path)
    meta = json.loads(header_path.read_text())
    if meta.get("order", "x-fastest") != "x-fastest":
        raise ValueError(f"unsupported voxel order {meta['order']!r}")
    dtype = _DTYPES[meta["dtype"]]
    dims = tuple(int(d) for d in meta["dims"])
    flat = np.frombuffer(_raw_path(header_path, meta).read_bytes(), dtype=dtype)
    if flat.size != np.prod(dims):
        raise ValueError(f"{header_path}: raw data has {flat.size} values, dims need {np.prod(dims)}")
    return meta, flat.reshape(dims, order="F")


def write_volume(header_path, vol: IntensityVolume) -> Path:
    return write_raw(header_path, vol.data, "f32", vol.spacing)


def write_mask(header_path, mask: VoxelMask, spacing=(1.0, 1.0, 1.0)) -> Path:
    return write_raw(header_path, mask.data, "u8", spacing)


def read_volume(header_path) -> IntensityVolume:
    meta, data = read_raw(header_path)
    if meta["dtype"] != "f32":
        raise ValueError(f"volume dtype must be f32, got {meta['dtype']!r}")
    return IntensityVolume(data.astype(np.float64), tuple(meta.get("spacing", (1, 1, 1))))


def read_mask(header_path) -> VoxelMask:
    meta, data = read_raw(header_path)
    if meta["dtype"] != "u8":
        raise ValueError(f"mask dtype must be u8, got {meta['dtype']!r}")
    if not np.isin(data, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return VoxelMask(data != 0)
