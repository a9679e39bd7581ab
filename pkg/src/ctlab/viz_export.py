"""Lung-area point clouds as ``x,y,z,value`` CSV tables for 3-D viewers."""
from __future__ import annotations

import numpy as np

from .preprocess import DEFAULT_WINDOWS, window_normalize
from .volume_io import DimensionMismatchError, validate_pair

SOURCES = ("ct", "ground_truth", "prediction")
HEADER = "x,y,z,value"


def export_pointcloud(ct, lung, source: str = "ct", mask=None, spacing: float | None = None,
                      nonzero_only: bool = False) -> np.ndarray:
    """Return an (n, 4) array of ``(x, y, z, value)`` rows, one per lung pixel.

    ``x`` is the column, ``y`` the row, ``z = slide * spacing``. For ``source="ct"``
    the value is the HU passed through the widest window; for the two mask
    sources it is the 0/1 mask value, taken from ``mask`` (a MaskVolume or a
    depth x height x width binary array). Rows are ordered slide, row, column.
    """
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}; expected one of {SOURCES}")
    validate_pair(ct, lung)
    if spacing is None:
        spacing = ct.header.slice_spacing
    if not spacing > 0:
        raise ValueError("spacing must be > 0")

    z, y, x = np.nonzero(lung.voxels)
    if source == "ct":
        values = window_normalize(ct.voxels[z, y, x], DEFAULT_WINDOWS[0])
    else:
        if mask is None:
            raise ValueError(f"source {source!r} needs a mask")
        m = np.asarray(getattr(mask, "voxels", mask))
        if m.shape != lung.voxels.shape:
            raise DimensionMismatchError(f"mask shape {m.shape} != lung shape {lung.voxels.shape}")
        if ((m != 0) & (m != 1)).any():
            raise ValueError("mask source must be binary")
        values = m[z, y, x].astype(np.float64)
    rows = np.column_stack([x, y, z * float(spacing), values]).astype(np.float64)
    if nonzero_only:
        rows = rows[rows[:, 3] != 0]
    return rows


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_pointcloud_csv(rows: np.ndarray, path) -> int:
    """Write rows with an ``x,y,z,value`` header; returns the row count."""
    lines = [HEADER]
    for x, y, z, v in rows:
        lines.append(f"{int(x)},{int(y)},{_fmt(z)},{_fmt(v)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(rows)
