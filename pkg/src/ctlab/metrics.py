"""Per-slice confusion metrics and lesion-only averaging."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

MEAN_ROW_ID = "MEAN(covid-only)"


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SliceMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    slide_id: object = None


@dataclass(frozen=True)
class AggregateMetrics:
    mean: SliceMetrics
    count: int


def _binary(a, name):
    a = np.asarray(a)
    if ((a != 0) & (a != 1)).any():
        raise ValueError(f"{name} must be binary")
    return a.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def slice_metrics(c: ConfusionCounts, slide_id=None) -> SliceMetrics:
    """Accuracy, precision, recall and F1; zero denominators give 0."""
    tp, fp, fn, tn = c
    total = tp + fp + fn + tn
    if total <= 0:
        raise ValueError("confusion counts are empty")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SliceMetrics((tp + tn) / total, precision, recall, f1, slide_id)


def aggregate(rows: Sequence[SliceMetrics], lesion_flags: Sequence[bool]) -> AggregateMetrics:
    """Unweighted mean over the slides flagged as containing lesion."""
    if len(rows) != len(lesion_flags):
        raise ValueError(f"{len(rows)} metric rows but {len(lesion_flags)} lesion flags")
    chosen = [r for r, f in zip(rows, lesion_flags) if f]
    if not chosen:
        raise ValueError("no slides with lesion to aggregate over")
    arr = np.array([[r.accuracy, r.precision, r.recall, r.f1] for r in chosen])
    m = arr.mean(axis=0)
    return AggregateMetrics(SliceMetrics(*map(float, m), slide_id=MEAN_ROW_ID), len(chosen))


def evaluate_masks(preds, gts, slide_ids=None):
    """SliceMetrics for each (pred, gt) pair of a stack."""
    if slide_ids is None:
        slide_ids = [None] * len(preds)
    return [slice_metrics(confusion(p, g), sid) for p, g, sid in zip(preds, gts, slide_ids)]


def _fmt_id(sid) -> str:
    if sid is None:
        return ""
    if isinstance(sid, (tuple, list)):
        return ":".join(str(x) for x in sid)
    return str(sid)


def write_report(path, rows: Sequence[SliceMetrics], lesion_flags: Sequence[bool]) -> AggregateMetrics:
    """CSV of per-slice metrics plus the lesion-only mean row."""
    agg = aggregate(rows, lesion_flags)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "accuracy", "precision", "recall", "f1", "has_lesion"])
        for r, flag in zip(rows, lesion_flags):
            w.writerow([_fmt_id(r.slide_id), f"{r.accuracy:.6f}", f"{r.precision:.6f}",
                        f"{r.recall:.6f}", f"{r.f1:.6f}", int(bool(flag))])
        m = agg.mean
        w.writerow([MEAN_ROW_ID, f"{m.accuracy:.6f}", f"{m.precision:.6f}",
                    f"{m.recall:.6f}", f"{m.f1:.6f}", agg.count])
    return agg
