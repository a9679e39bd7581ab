"""Turn paired CT + mask volumes into 4-channel samples, splits and lint reports."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .volume_io import DimensionMismatchError, read_volume, validate_pair

log = logging.getLogger(__name__)


class SlideId(NamedTuple):
    tag: str
    volume: int
    slide: int


@dataclass(frozen=True)
class WindowSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window lo must be < hi, got [{self.lo}, {self.hi}]")


DEFAULT_WINDOWS = (WindowSpec(-970, -150), WindowSpec(-700, -450), WindowSpec(-450, -150))


@dataclass(frozen=True)
class ChannelBank:
    windows: tuple = DEFAULT_WINDOWS

    def __post_init__(self):
        w = tuple(self.windows)
        if len(w) != 3:
            raise ValueError(f"a channel bank needs exactly 3 windows, got {len(w)}")
        outer = w[0]
        for inner in w[1:]:
            if inner.lo < outer.lo or inner.hi > outer.hi:
                raise ValueError(f"window 1 {outer} must contain {inner}")
        object.__setattr__(self, "windows", w)


@dataclass
class Sample:
    input: np.ndarray      # (4, S, S) float32 in [0, 1]
    target: np.ndarray     # (2, S, S) one-hot: lesion, non-lesion
    slide_id: SlideId
    has_lesion: bool


@dataclass
class ManifestEntry:
    ct: str
    lung: str
    lesion: str
    tag: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps([asdict(e) for e in self.entries], indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, validate: bool = True) -> "DatasetManifest":
        path = Path(path)
        base = path.parent
        entries = []
        for rec in json.loads(path.read_text()):
            paths = {k: rec[k] if Path(rec[k]).is_absolute() else str(base / rec[k])
                     for k in ("ct", "lung", "lesion")}
            entries.append(ManifestEntry(tag=str(rec["tag"]), **paths))
        manifest = cls(entries)
        if validate:
            manifest.validate()
        return manifest

    def validate(self) -> None:
        for e in self.entries:
            ct = read_volume(e.ct)
            validate_pair(ct, read_volume(e.lung))
            validate_pair(ct, read_volume(e.lesion))

    def tags(self) -> list:
        seen = []
        for e in self.entries:
            if e.tag not in seen:
                seen.append(e.tag)
        return seen

    def volumes(self, tag: str | None = None):
        """Yield (tag, volume index, ct, lung, lesion); volume index counts within a tag."""
        counters: dict = {}
        for e in self.entries:
            idx = counters.get(e.tag, 0)
            counters[e.tag] = idx + 1
            if tag is not None and e.tag != tag:
                continue
            yield e.tag, idx, read_volume(e.ct), read_volume(e.lung), read_volume(e.lesion)


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    val_count: int
    lesion_ratio: float = 0.5
    seed: int = 0
    holdout_volumes: tuple = ()

    def __post_init__(self):
        if self.train_count < 0 or self.val_count < 0:
            raise ValueError("split counts must be >= 0")
        if not 0.0 <= self.lesion_ratio <= 1.0:
            raise ValueError("lesion_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class LintFinding:
    slide_id: SlideId
    kind: str               # "lesion_outside_lung" | "tiny_component"
    pixel_count: int
    location: tuple         # (row_min, col_min, row_max, col_max), inclusive

    def to_json(self) -> str:
        return json.dumps({
            "slide_id": list(self.slide_id),
            "kind": self.kind,
            "pixel_count": self.pixel_count,
            "location": list(self.location),
        })


def resize_nn(image, side: int) -> np.ndarray:
    """Nearest-neighbour resize of an H x W grid to side x side.

    ``out[i, j] = image[floor(i*H/side), floor(j*W/side)]``, so the output only
    contains values present in the input.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"resize_nn expects a 2-D grid, got shape {image.shape}")
    h, w = image.shape
    if h < 1 or w < 1 or side < 1:
        raise ValueError("image dimensions and target side must be >= 1")
    rows = (np.arange(side) * h) // side
    cols = (np.arange(side) * w) // side
    return image[np.ix_(rows, cols)]


def window_normalize(hu, w: WindowSpec):
    """Linear map of [w.lo, w.hi] onto [0, 1] with clamping; scalar or array."""
    out = np.clip((np.asarray(hu, dtype=np.float64) - w.lo) / (w.hi - w.lo), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def assemble_input(hu_slide, lung, bank: ChannelBank = ChannelBank()) -> np.ndarray:
    hu_slide = np.asarray(hu_slide)
    lung = np.asarray(lung)
    if hu_slide.shape != lung.shape:
        raise DimensionMismatchError(f"CT slide {hu_slide.shape} vs lung mask {lung.shape}")
    chans = [window_normalize(hu_slide, w) for w in bank.windows]
    chans.append((lung != 0).astype(np.float64))
    return np.stack(chans).astype(np.float32)


def assemble_target(lesion) -> np.ndarray:
    lesion = np.asarray(lesion)
    if ((lesion != 0) & (lesion != 1)).any():
        raise ValueError("lesion mask must be binary")
    lesion = lesion.astype(np.uint8)
    return np.stack([lesion, 1 - lesion])


def filter_slides(manifest: DatasetManifest) -> list:
    """Slides whose lung mask is nonempty, each paired with its has_lesion flag.

    Returns a list of ``(SlideId, has_lesion)``.
    """
    kept = []
    for tag, vidx, _ct, lung, lesion in manifest.volumes():
        lung_any = lung.voxels.reshape(lung.header.depth, -1).any(axis=1)
        les_any = lesion.voxels.reshape(lesion.header.depth, -1).any(axis=1)
        for s in np.flatnonzero(lung_any):
            kept.append((SlideId(tag, vidx, int(s)), bool(les_any[s])))
        dropped = int((~lung_any).sum())
        if dropped:
            log.info("%s volume %d: excluded %d slides without lung area", tag, vidx, dropped)
    return kept


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_dataset(slides: Sequence, spec: SplitSpec):
    """Draw class-balanced train/val lists; every other slide goes to test.

    ``slides`` is a sequence of ``(SlideId, has_lesion)`` pairs. Slides from
    ``spec.holdout_volumes`` (volume indices) are forced into test.
    """
    slides = sorted((SlideId(*s), bool(f)) for s, f in slides)
    held = set(spec.holdout_volumes)
    pool = [(s, f) for s, f in slides if s.volume not in held]
    lesion = [s for s, f in pool if f]
    clean = [s for s, f in pool if not f]

    n_tr_les = _round_half_up(spec.train_count * spec.lesion_ratio)
    n_va_les = _round_half_up(spec.val_count * spec.lesion_ratio)
    n_tr_cln = spec.train_count - n_tr_les
    n_va_cln = spec.val_count - n_va_les
    if n_tr_les + n_va_les > len(lesion):
        raise ValueError(f"insufficient lesion slides: need {n_tr_les + n_va_les}, have {len(lesion)}")
    if n_tr_cln + n_va_cln > len(clean):
        raise ValueError(f"insufficient non-lesion slides: need {n_tr_cln + n_va_cln}, have {len(clean)}")

    rng = np.random.default_rng(spec.seed)
    les_order = [lesion[i] for i in rng.permutation(len(lesion))]
    cln_order = [clean[i] for i in rng.permutation(len(clean))]
    train = les_order[:n_tr_les] + cln_order[:n_tr_cln]
    val = les_order[n_tr_les:n_tr_les + n_va_les] + cln_order[n_tr_cln:n_tr_cln + n_va_cln]
    used = set(train) | set(val)
    test = [s for s, _ in slides if s not in used]
    return sorted(train), sorted(val), test


def lint_annotations(lung, lesion, min_component: int = 10, tag: str = "", volume_index: int = 0):
    """Flag lesion components that leave the lung or are suspiciously small.

    Components are 4-connected. ``lesion_outside_lung`` findings report the
    number of component pixels where the lung mask is 0; ``tiny_component``
    findings report the component size.
    """
    validate_pair(lung, lesion)
    findings = []
    structure = ndimage.generate_binary_structure(2, 1)
    for s in range(lesion.header.depth):
        les = lesion.voxels[s]
        if not les.any():
            continue
        labels, n = ndimage.label(les, structure=structure)
        lung_s = lung.voxels[s]
        sid = SlideId(tag, volume_index, s)
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == k
            bbox = (sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1)
            outside = int((comp & (lung_s[sl] == 0)).sum())
            if outside:
                findings.append(LintFinding(sid, "lesion_outside_lung", outside, bbox))
            size = int(comp.sum())
            if size < min_component:
                findings.append(LintFinding(sid, "tiny_component", size, bbox))
    return findings


def lint_manifest(manifest: DatasetManifest, min_component: int = 10) -> list:
    out = []
    for tag, vidx, _ct, lung, lesion in manifest.volumes():
        out.extend(lint_annotations(lung, lesion, min_component, tag=tag, volume_index=vidx))
    return out


def write_lint_report(findings, path) -> None:
    Path(path).write_text("".join(f.to_json() + "\n" for f in findings))


# ---------------------------------------------------------------- sample store

@dataclass
class SampleSet:
    """Stacked samples of one dataset tag, indexable by SlideId."""

    inputs: np.ndarray          # (n, 4, S, S) float32
    targets: np.ndarray         # (n, 2, S, S) uint8
    slide_ids: list
    has_lesion: np.ndarray      # (n,) bool

    def __len__(self):
        return len(self.slide_ids)

    def subset(self, ids) -> "SampleSet":
        index = {s: i for i, s in enumerate(self.slide_ids)}
        try:
            rows = [index[SlideId(*s)] for s in ids]
        except KeyError as exc:
            raise KeyError(f"slide {exc.args[0]} not in sample set") from None
        rows = np.asarray(rows, dtype=np.intp)
        return SampleSet(self.inputs[rows], self.targets[rows],
                         [self.slide_ids[i] for i in rows], self.has_lesion[rows])

    def sample(self, i: int) -> Sample:
        return Sample(self.inputs[i], self.targets[i], self.slide_ids[i], bool(self.has_lesion[i]))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "inputs.npy", np.ascontiguousarray(self.inputs, dtype=np.float32))
        np.save(d / "targets.npy", np.ascontiguousarray(self.targets, dtype=np.uint8))
        meta = {"slide_ids": [list(s) for s in self.slide_ids],
                "has_lesion": [bool(x) for x in self.has_lesion]}
        (d / "samples.json").write_text(json.dumps(meta) + "\n")

    @classmethod
    def load(cls, directory) -> "SampleSet":
        d = Path(directory)
        meta = json.loads((d / "samples.json").read_text())
        return cls(np.load(d / "inputs.npy"), np.load(d / "targets.npy"),
                   [SlideId(*s) for s in meta["slide_ids"]],
                   np.asarray(meta["has_lesion"], dtype=bool))


def build_samples(manifest: DatasetManifest, tag: str, side: int,
                  bank: ChannelBank = ChannelBank(), jobs: int = 1) -> SampleSet:
    """Resize, window and stack every lung-bearing slide of one dataset tag."""
    volumes = list(manifest.volumes(tag))

    def one(item):
        _tag, vidx, ct, lung, lesion = item
        rows = []
        for s in range(ct.header.depth):
            if not lung.voxels[s].any():
                continue
            hu = resize_nn(ct.voxels[s], side)
            lg = resize_nn(lung.voxels[s], side)
            ls = resize_nn(lesion.voxels[s], side)
            rows.append((assemble_input(hu, lg, bank), assemble_target(ls),
                         SlideId(tag, vidx, s), bool(lesion.voxels[s].any())))
        return rows

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(one, volumes))
    else:
        chunks = [one(v) for v in volumes]
    rows = [r for chunk in chunks for r in chunk]
    if not rows:
        raise ValueError(f"dataset {tag!r} has no slides with lung area")
    return SampleSet(
        np.stack([r[0] for r in rows]),
        np.stack([r[1] for r in rows]),
        [r[2] for r in rows],
        np.array([r[3] for r in rows], dtype=bool),
    )
