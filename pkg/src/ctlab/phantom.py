"""Synthetic chest-CT phantoms with lung and lesion masks.

``shift`` offsets every tissue centre by a fixed number of HU and stands in
for scanner-to-scanner calibration differences; the random geometry and noise
do not depend on it.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .preprocess import DatasetManifest, ManifestEntry
from .volume_io import HounsfieldVolume, MaskVolume, write_volume

BACKGROUND_HU = 0
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class PhantomSpec:
    side: int = 32
    depth: int = 16
    volumes: int = 4
    lung_hu_center: int = -650
    lung_hu_jitter: float = 20.0
    lesion_hu_center: int = -300
    lesion_hu_spread: float = 0.0
    lesion_fraction: float = 0.15
    lesion_slide_prob: float = 0.6
    shift: int = 0
    noise_sd: float = 30.0
    slice_spacing: float = 1.0
    min_lesion_component: int = 10
    inject_faults: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.side < 8 or self.depth < 1 or self.volumes < 1:
            raise ValueError("side must be >= 8, depth and volumes >= 1")
        for name in ("lesion_fraction", "lesion_slide_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("lung_hu_center", "lesion_hu_center"):
            c = getattr(self, name) + self.shift
            if not -970 < c < -150:
                raise ValueError(f"{name} + shift = {c} HU falls outside (-970, -150)")
        if self.noise_sd < 0 or self.lung_hu_jitter < 0 or self.lesion_hu_spread < 0:
            raise ValueError("noise_sd, lung_hu_jitter and lesion_hu_spread must be >= 0")
        if self.slice_spacing <= 0:
            raise ValueError("slice_spacing must be > 0")
        if int(self.shift) != self.shift:
            raise ValueError("shift must be a whole number of HU")

    def check_unet_depth(self, unet_depth: int) -> None:
        if self.side % (2 ** unet_depth):
            raise ValueError(f"phantom side {self.side} is not divisible by 2**{unet_depth}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class Fault(NamedTuple):
    volume: int
    slide: int
    kind: str           # lesion_outside_lung | tiny_component
    bbox: tuple         # (row_min, col_min, row_max, col_max)


@dataclass
class PhantomCase:
    ct: HounsfieldVolume
    lung: MaskVolume
    lesion: MaskVolume
    faults: list


def _ellipse(side, cy, cx, ry, rx, angle=0.0):
    yy, xx = np.mgrid[:side, :side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dy + s * dx) / max(ry, 1e-6)
    v = (-s * dy + c * dx) / max(rx, 1e-6)
    return u * u + v * v <= 1.0


def _lung_slide(spec: PhantomSpec, rng, z: int, geom) -> np.ndarray:
    S = spec.side
    # lungs are widest mid-volume and taper towards both ends
    t = np.sin(np.pi * (z + 0.5) / spec.depth)
    scale = 0.45 + 0.55 * t
    mask = np.zeros((S, S), dtype=bool)
    drop = rng.integers(2) if rng.random() < 0.15 else -1
    for k, (cx, ry, rx, ang) in enumerate(geom):
        if k == drop:
            continue
        mask |= _ellipse(S, S * 0.5, cx, ry * scale, rx * scale, ang)
    return mask


def _lesion_slide(spec: PhantomSpec, rng, lung: np.ndarray) -> np.ndarray:
    S = spec.side
    les = np.zeros_like(lung)
    area = lung.sum()
    target = spec.lesion_fraction * area
    if target < spec.min_lesion_component or rng.random() >= spec.lesion_slide_prob:
        return les
    rows, cols = np.nonzero(lung)
    n_blobs = int(rng.integers(1, 3))
    for _ in range(n_blobs):
        i = rng.integers(len(rows))
        r = np.sqrt(target / n_blobs / np.pi)
        ratio = rng.uniform(0.7, 1.4)
        les |= _ellipse(S, rows[i], cols[i], r * ratio, r / ratio, rng.uniform(0, np.pi))
    les &= lung
    labels, n = ndimage.label(les, structure=_FOUR)
    if n:
        sizes = ndimage.sum_labels(les, labels, index=np.arange(1, n + 1))
        keep = np.flatnonzero(sizes >= spec.min_lesion_component) + 1
        les = np.isin(labels, keep)
    return les


def _bbox(mask):
    r, c = np.nonzero(mask)
    return (int(r.min()), int(c.min()), int(r.max()), int(c.max()))


def _free_spot(rng, allowed: np.ndarray, shape_mask: np.ndarray):
    """Random offset where ``shape_mask`` fits entirely in ``allowed``; None if impossible."""
    h, w = shape_mask.shape
    S = allowed.shape[0]
    spots = [(r, c) for r in range(S - h + 1) for c in range(S - w + 1)
             if allowed[r:r + h, c:c + w][shape_mask].all()]
    if not spots:
        return None
    return spots[rng.integers(len(spots))]


def _inject(spec, rng, vidx, lungs, lesions, faults):
    """Plant one tiny in-lung blob and one out-of-lung blob per volume, on random slides."""
    S = spec.side
    tiny = np.array([[1, 1], [1, 0]], dtype=bool)          # 3 pixels
    square = np.ones((4, 4), dtype=bool)                   # 16 pixels
    for kind, shape, region in (("tiny_component", tiny, "lung"),
                                ("lesion_outside_lung", square, "outside")):
        for z in rng.permutation(spec.depth):
            lung, les = lungs[z], lesions[z]
            # keep a one-pixel gap from existing lesions so components stay separate
            clear = ~ndimage.binary_dilation(les, structure=_FOUR)
            if region == "lung":
                allowed = ndimage.binary_erosion(lung, structure=_FOUR) & clear
            else:
                allowed = ~ndimage.binary_dilation(lung, structure=_FOUR) & clear
            spot = _free_spot(rng, allowed, shape)
            if spot is None:
                continue
            r, c = spot
            planted = np.zeros((S, S), dtype=bool)
            planted[r:r + shape.shape[0], c:c + shape.shape[1]] = shape
            les |= planted
            faults.append(Fault(vidx, int(z), kind, _bbox(planted)))
            break


def generate_volume(spec: PhantomSpec, index: int) -> PhantomCase:
    rng = np.random.default_rng([spec.seed, index])
    S = spec.side
    geom = []
    for cx_frac in (0.3, 0.7):
        geom.append((S * cx_frac + rng.uniform(-0.03, 0.03) * S,
                     S * rng.uniform(0.26, 0.32), S * rng.uniform(0.12, 0.16),
                     rng.uniform(-0.2, 0.2)))
    lung_offset = rng.uniform(-spec.lung_hu_jitter, spec.lung_hu_jitter)
    lungs, lesions = [], []
    for z in range(spec.depth):
        lung = _lung_slide(spec, rng, z, geom)
        lungs.append(lung)
        lesions.append(_lesion_slide(spec, rng, lung))
    # ground-glass vs consolidation: each slide's lesions get their own HU offset
    lesion_offset = rng.uniform(-spec.lesion_hu_spread, spec.lesion_hu_spread, size=spec.depth)
    noise = rng.standard_normal((spec.depth, S, S)) * spec.noise_sd

    lung_v = np.stack(lungs)
    les_v = np.stack(lesions)
    base = np.full((spec.depth, S, S), float(BACKGROUND_HU))
    base[lung_v] = spec.lung_hu_center + lung_offset
    base[les_v] = (spec.lesion_hu_center + lesion_offset[:, None, None] + np.zeros_like(base))[les_v]
    hu = np.rint(base + noise) + int(spec.shift)
    hu = np.clip(hu, -32768, 32767).astype(np.int16)

    faults: list = []
    if spec.inject_faults:
        lesions = [l.copy() for l in lesions]
        _inject(spec, rng, index, lungs, lesions, faults)
        les_v = np.stack(lesions)
    return PhantomCase(
        HounsfieldVolume.from_array(hu, spec.slice_spacing),
        MaskVolume.from_array(lung_v.astype(np.uint8), "lung", spec.slice_spacing),
        MaskVolume.from_array(les_v.astype(np.uint8), "lesion", spec.slice_spacing),
        faults,
    )


def generate_dataset(spec: PhantomSpec, jobs: int = 1) -> list:
    """One PhantomCase per volume; volume ``i`` depends only on ``(seed, i)``."""
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda i: generate_volume(spec, i), range(spec.volumes)))
    return [generate_volume(spec, i) for i in range(spec.volumes)]


def write_dataset(cases, out_dir, tag: str, manifest: DatasetManifest | None = None,
                  relative_to=None) -> DatasetManifest:
    """Write each case as three CTV pairs and append entries to ``manifest``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest if manifest is not None else DatasetManifest()
    rel = Path(relative_to) if relative_to is not None else None
    for i, case in enumerate(cases):
        paths = {}
        for name, vol in (("ct", case.ct), ("lung", case.lung), ("lesion", case.lesion)):
            p = out_dir / f"{tag}_vol{i:03d}_{name}"
            write_volume(vol, p)
            shown = p.with_name(p.name + ".ctv")
            paths[name] = str(shown.relative_to(rel)) if rel is not None else str(shown)
        manifest.entries.append(ManifestEntry(tag=tag, **paths))
    return manifest
