"""Sequential train / retrain / test protocol and its results matrix.

A lineage is trained on one dataset, then each retrain stage resumes from
the previous stage's best checkpoint on the next dataset. Rows are named
``Tr{t}_R_{r1}_R_{r2}_Te{e}`` (``_R_None`` when there is no retraining).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import SliceMetrics, aggregate, evaluate_masks
from .preprocess import SampleSet, SplitSpec, split_dataset
from .segnet import ParamSet, TrainConfig, TrainingDiverged, TrainLog, UNetConfig, init_unet, predict_mask, train

log = logging.getLogger(__name__)


def _check_tag(tag) -> str:
    if not isinstance(tag, str) or not tag or "_" in tag or tag == "None":
        raise ValueError(f"malformed dataset tag {tag!r}: need a nonempty string without '_', not 'None'")
    return tag


def lineage_name(train_tag: str, retrain_tags=()) -> str:
    name = f"Tr{_check_tag(train_tag)}"
    if not retrain_tags:
        return name + "_R_None"
    return name + "".join(f"_R_{_check_tag(r)}" for r in retrain_tags)


def plan_name(train_tag: str, retrain_tags, test_tag: str) -> str:
    return f"{lineage_name(train_tag, retrain_tags)}_Te{_check_tag(test_tag)}"


@dataclass
class DatasetSplits:
    train: SampleSet
    val: SampleSet
    test: SampleSet

    @classmethod
    def from_samples(cls, samples: SampleSet, spec: SplitSpec) -> "DatasetSplits":
        pairs = list(zip(samples.slide_ids, samples.has_lesion))
        tr, va, te = split_dataset(pairs, spec)
        return cls(samples.subset(tr), samples.subset(va), samples.subset(te))


@dataclass
class ExperimentPlan:
    train_tag: str
    retrain_tags: list = field(default_factory=list)
    test_tags: list = field(default_factory=list)
    stage_epochs: list | None = None        # one entry per stage; None keeps the TrainConfig value
    seeds: dict = field(default_factory=lambda: {"init": 0, "train": 0})

    def __post_init__(self):
        _check_tag(self.train_tag)
        for t in list(self.retrain_tags) + list(self.test_tags):
            _check_tag(t)
        if self.stage_epochs is not None and len(self.stage_epochs) != 1 + len(self.retrain_tags):
            raise ValueError(f"stage_epochs needs {1 + len(self.retrain_tags)} entries, got {len(self.stage_epochs)}")

    @property
    def stage_tags(self) -> list:
        return [self.train_tag, *self.retrain_tags]

    def stage_seed(self, stage: int) -> int:
        return int(self.seeds.get("train", 0)) + stage

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        return cls(train_tag=str(d["train"]), retrain_tags=[str(t) for t in d.get("retrains", [])],
                   test_tags=[str(t) for t in d.get("tests", [])], stage_epochs=d.get("stage_epochs"),
                   seeds=dict(d.get("seeds", {"init": 0, "train": 0})))

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"train": self.train_tag, "retrains": list(self.retrain_tags), "tests": list(self.test_tags),
                "stage_epochs": self.stage_epochs, "seeds": dict(self.seeds)}


@dataclass
class ModelLineage:
    name: str
    checkpoints: list = field(default_factory=list)     # ParamSet per stage
    logs: list = field(default_factory=list)            # TrainLog per stage
    seeds: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, (p, lg) in enumerate(zip(self.checkpoints, self.logs)):
            p.save(d / f"{self.name}_stage{k}")
            lg.to_csv(d / f"{self.name}_stage{k}_log.csv")


@dataclass(frozen=True)
class MatrixRow:
    name: str
    test_tag: str
    metrics: SliceMetrics
    count: int


@dataclass
class ResultsMatrix:
    rows: list = field(default_factory=list)

    def row(self, name: str) -> MatrixRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(f"no row named {name!r}")

    def for_test(self, test_tag: str) -> MatrixRow:
        hits = [r for r in self.rows if r.test_tag == test_tag]
        if not hits:
            raise KeyError(f"no row for test set {test_tag!r}")
        if len(hits) > 1:
            raise KeyError(f"{len(hits)} rows for test set {test_tag!r}; select a lineage first")
        return hits[0]

    def select(self, lineage: str) -> "ResultsMatrix":
        """Rows belonging to exactly this lineage (name minus the ``_Te`` suffix)."""
        return ResultsMatrix([r for r in self.rows if r.name.rsplit("_Te", 1)[0] == lineage])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "Acc", "Pre", "Rec", "F1", "slides"])
            for r in self.rows:
                m = r.metrics
                w.writerow([r.name, f"{m.accuracy:.6f}", f"{m.precision:.6f}",
                            f"{m.recall:.6f}", f"{m.f1:.6f}", r.count])

    @classmethod
    def from_csv(cls, path) -> "ResultsMatrix":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                m = SliceMetrics(float(rec["Acc"]), float(rec["Pre"]), float(rec["Rec"]), float(rec["F1"]))
                rows.append(MatrixRow(rec["name"], rec["name"].rsplit("_Te", 1)[1], m, int(rec["slides"])))
        return cls(rows)


class StageError(RuntimeError):
    def __init__(self, stage: int, tag: str, cause: Exception):
        super().__init__(f"stage {stage} (dataset {tag}) failed: {cause}")
        self.stage = stage


def evaluate(params: ParamSet, test: SampleSet, threshold: float = 0.5):
    """Per-slice metrics on a test split and their lesion-only mean."""
    if len(test) == 0:
        raise ValueError("test split is empty")
    preds = predict_mask(params, test.inputs, threshold)
    rows = evaluate_masks(preds, test.targets[:, 0], test.slide_ids)
    return rows, aggregate(rows, test.has_lesion)


def run_experiment(plan: ExperimentPlan, registry: dict, unet: UNetConfig,
                   train_cfg: TrainConfig = TrainConfig(), threshold: float = 0.5,
                   evaluate_stages: bool = False):
    """Train every stage of ``plan`` and evaluate on its test tags.

    With ``evaluate_stages`` the test sets are scored after every stage, so a
    single ``Tr1 R2 R3`` run yields the ``Tr1_R_None``, ``Tr1_R_2`` and
    ``Tr1_R_2_R_3`` rows at once.
    """
    for tag in plan.stage_tags + list(plan.test_tags):
        if tag not in registry:
            raise KeyError(f"dataset {tag!r} is not registered")
    lineage = ModelLineage(lineage_name(plan.train_tag, plan.retrain_tags), seeds=dict(plan.seeds))
    matrix = ResultsMatrix()
    params = init_unet(unet, int(plan.seeds.get("init", 0)))
    for k, tag in enumerate(plan.stage_tags):
        cfg = replace(train_cfg, seed=plan.stage_seed(k))
        if plan.stage_epochs is not None:
            cfg = replace(cfg, max_epochs=int(plan.stage_epochs[k]))
        data = registry[tag]
        try:
            params, trace = train(params, data.train, data.val, cfg)
        except (TrainingDiverged, ValueError) as exc:
            raise StageError(k, tag, exc) from exc
        log.info("%s stage %d on %s: %d epochs (%s)", lineage.name, k, tag, trace.stopped_epoch, trace.stop_reason)
        lineage.checkpoints.append(params)
        lineage.logs.append(trace)
        if evaluate_stages or k == len(plan.stage_tags) - 1:
            retrains = plan.retrain_tags[:k]
            for test_tag in plan.test_tags:
                _, agg = evaluate(params, registry[test_tag].test, threshold)
                matrix.rows.append(MatrixRow(plan_name(plan.train_tag, retrains, test_tag),
                                             test_tag, agg.mean, agg.count))
    return lineage, matrix


def forgetting_delta(matrix_before: ResultsMatrix, matrix_after: ResultsMatrix, test_tag: str) -> float:
    """F1(after) - F1(before) on one test set; negative means forgetting."""
    return matrix_after.for_test(test_tag).metrics.f1 - matrix_before.for_test(test_tag).metrics.f1
