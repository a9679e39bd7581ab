"""CTV volume format: a JSON header sidecar plus a little-endian raw raster.

``<name>.ctv.json`` holds ``width``, ``height``, ``depth``, ``slice_spacing``,
``value_kind`` and (masks only) ``role``. ``<name>.ctv.raw`` holds the voxels
slide-major, then row-major, then column order. Hounsfield volumes are stored
as ``<i2``, masks as ``u1``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HOUNSFIELD = "hounsfield_i16"
MASK = "mask_u8"
ROLES = ("lung", "lesion")

_DTYPES = {HOUNSFIELD: np.dtype("<i2"), MASK: np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised for malformed headers, rasters, or invariant violations."""


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeHeader:
    width: int
    height: int
    depth: int
    slice_spacing: float = 1.0
    value_kind: str = HOUNSFIELD

    def __post_init__(self):
        for name in ("width", "height", "depth"):
            if int(getattr(self, name)) < 1:
                raise VolumeFormatError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.slice_spacing > 0:
            raise VolumeFormatError(f"slice_spacing must be > 0, got {self.slice_spacing}")
        if self.value_kind not in _DTYPES:
            raise VolumeFormatError(f"unknown value_kind {self.value_kind!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.depth, self.height, self.width)

    @property
    def nbytes(self) -> int:
        return self.width * self.height * self.depth * _DTYPES[self.value_kind].itemsize


def _header_for(voxels: np.ndarray, spacing: float, kind: str) -> VolumeHeader:
    if voxels.ndim != 3:
        raise VolumeFormatError(f"voxels must be 3-D (depth, height, width), got shape {voxels.shape}")
    d, h, w = voxels.shape
    return VolumeHeader(width=w, height=h, depth=d, slice_spacing=float(spacing), value_kind=kind)


@dataclass(frozen=True, eq=False)
class HounsfieldVolume:
    """Stack of int16 HU slides, shape (depth, height, width)."""

    header: VolumeHeader
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.header.value_kind != HOUNSFIELD:
            raise VolumeFormatError("HounsfieldVolume requires value_kind hounsfield_i16")
        if self.voxels.shape != self.header.shape:
            raise VolumeFormatError(f"voxel shape {self.voxels.shape} != header shape {self.header.shape}")
        vox = np.ascontiguousarray(self.voxels, dtype=np.int16)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)

    @classmethod
    def from_array(cls, voxels, slice_spacing: float = 1.0) -> "HounsfieldVolume":
        arr = np.asarray(voxels)
        if arr.size and (arr.min() < -32768 or arr.max() > 32767):
            raise VolumeFormatError("HU values outside int16 range")
        return cls(_header_for(arr, slice_spacing, HOUNSFIELD), arr.astype(np.int16))

    @property
    def shape(self):
        return self.voxels.shape

    def __eq__(self, other):
        return (isinstance(other, HounsfieldVolume) and self.header == other.header
                and np.array_equal(self.voxels, other.voxels))


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary stack aligned to a HounsfieldVolume; ``role`` is lung or lesion."""

    header: VolumeHeader
    role: str
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.header.value_kind != MASK:
            raise VolumeFormatError("MaskVolume requires value_kind mask_u8")
        if self.role not in ROLES:
            raise VolumeFormatError(f"mask role must be one of {ROLES}, got {self.role!r}")
        if self.voxels.shape != self.header.shape:
            raise VolumeFormatError(f"voxel shape {self.voxels.shape} != header shape {self.header.shape}")
        arr = np.asarray(self.voxels)
        bad = (arr != 0) & (arr != 1)
        if bad.any():
            raise VolumeFormatError(f"mask contains {int(bad.sum())} voxels outside {{0,1}} "
                                    f"(e.g. value {arr[bad].flat[0]})")
        vox = np.ascontiguousarray(arr, dtype=np.uint8)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)

    @classmethod
    def from_array(cls, voxels, role: str, slice_spacing: float = 1.0) -> "MaskVolume":
        arr = np.asarray(voxels)
        return cls(_header_for(arr, slice_spacing, MASK), role, arr)

    @property
    def shape(self):
        return self.voxels.shape

    def __eq__(self, other):
        return (isinstance(other, MaskVolume) and self.header == other.header
                and self.role == other.role and np.array_equal(self.voxels, other.voxels))


def _paths(path) -> tuple[Path, Path]:
    """Map ``foo``, ``foo.ctv``, ``foo.ctv.json`` or ``foo.ctv.raw`` to the file pair."""
    p = str(path)
    for suffix in (".ctv.json", ".ctv.raw", ".ctv"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
            break
    return Path(p + ".ctv.json"), Path(p + ".ctv.raw")


def write_volume(volume, path) -> None:
    """Write a HounsfieldVolume or MaskVolume as a CTV header + raster pair."""
    json_path, raw_path = _paths(path)
    if not json_path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {json_path.parent}")
    h = volume.header
    dtype = _DTYPES[h.value_kind]
    vox = np.asarray(volume.voxels)
    if vox.shape != h.shape:
        raise VolumeFormatError(f"raster shape {vox.shape} does not match header {h.shape}")
    if isinstance(volume, MaskVolume) and ((vox != 0) & (vox != 1)).any():
        raise VolumeFormatError("mask contains values outside {0,1}")
    blob = np.ascontiguousarray(vox, dtype=dtype).tobytes()
    if len(blob) != h.nbytes:
        raise VolumeFormatError(f"raster is {len(blob)} bytes, header implies {h.nbytes}")
    meta = {
        "width": h.width,
        "height": h.height,
        "depth": h.depth,
        "slice_spacing": h.slice_spacing,
        "value_kind": h.value_kind,
    }
    if isinstance(volume, MaskVolume):
        meta["role"] = volume.role
    json_path.write_text(json.dumps(meta, indent=2) + "\n")
    raw_path.write_bytes(blob)


def read_header(path) -> tuple[VolumeHeader, str | None]:
    json_path, _ = _paths(path)
    if not json_path.exists():
        raise FileNotFoundError(f"missing CTV header: {json_path}")
    try:
        meta = json.loads(json_path.read_text())
        header = VolumeHeader(
            width=int(meta["width"]),
            height=int(meta["height"]),
            depth=int(meta["depth"]),
            slice_spacing=float(meta.get("slice_spacing", 1.0)),
            value_kind=meta["value_kind"],
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"malformed CTV header {json_path}: {exc}") from exc
    return header, meta.get("role")


def read_volume(path):
    """Read a CTV pair back into a HounsfieldVolume or MaskVolume."""
    header, role = read_header(path)
    _, raw_path = _paths(path)
    if not raw_path.exists():
        raise FileNotFoundError(f"missing CTV raster: {raw_path}")
    actual = os.path.getsize(raw_path)
    if actual != header.nbytes:
        raise VolumeFormatError(
            f"raster size mismatch for {raw_path}: expected {header.nbytes} bytes, got {actual}")
    data = np.fromfile(raw_path, dtype=_DTYPES[header.value_kind]).reshape(header.shape)
    if header.value_kind == HOUNSFIELD:
        return HounsfieldVolume(header, data.astype(np.int16))
    if role is None:
        raise VolumeFormatError(f"mask header {path} lacks 'role'")
    return MaskVolume(header, role, data)


def validate_pair(ct, mask) -> None:
    """Raise DimensionMismatchError unless width, height and depth all agree."""
    a, b = ct.header, mask.header
    if (a.width, a.height, a.depth) != (b.width, b.height, b.depth):
        raise DimensionMismatchError(
            f"dimension mismatch: ct is {a.width}x{a.height}x{a.depth}, "
            f"mask is {b.width}x{b.height}x{b.depth} (width x height x depth)")
