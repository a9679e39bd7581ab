"""``ctlab`` command line: phantom -> preprocess -> train/retrain -> evaluate/matrix -> export3d.

Every command writes a run manifest under ``<out-dir>/runs/`` holding the
full argument list, resolved settings, seeds and produced files; ``ctlab
replay <manifest>`` re-executes it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import write_report
from .phantom import PhantomSpec, generate_dataset, write_dataset
from .preprocess import (DatasetManifest, SampleSet, SlideId, SplitSpec, build_samples, lint_manifest,
                         resize_nn, assemble_input, split_dataset, write_lint_report)
from .segnet import ParamSet, TrainConfig, UNetConfig, init_unet, predict_mask, train
from .transfer import DatasetSplits, ExperimentPlan, evaluate, run_experiment
from .viz_export import export_pointcloud, write_pointcloud_csv
from .volume_io import read_volume

ENV_OUT = "CTLAB_OUT"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers

class Run:
    """Collects settings and produced files for the run manifest."""

    def __init__(self, out_dir: Path, command: str):
        self.out_dir = out_dir
        self.command = command
        self.settings: dict = {}
        self.seeds: dict = {}
        self.artifacts: list = []

    def path(self, *parts) -> Path:
        p = self.out_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def produced(self, *paths) -> None:
        for p in paths:
            self.artifacts.append(str(Path(p).relative_to(self.out_dir)))


def _samples_dir(args, run: Run) -> Path:
    return Path(args.samples_dir) if args.samples_dir else run.out_dir / "samples"


def _load_splits(args, run: Run, tag: str) -> DatasetSplits:
    d = _samples_dir(args, run) / tag
    if not (d / "splits.json").exists():
        raise CommandError(f"no preprocessed splits for dataset {tag!r} in {d}; run 'ctlab preprocess' first")
    samples = SampleSet.load(d)
    splits = json.loads((d / "splits.json").read_text())
    return DatasetSplits(*(samples.subset([SlideId(*s) for s in splits[k]]) for k in ("train", "val", "test")))


def _checkpoint_path(run: Run, name: str) -> Path:
    return run.out_dir / "checkpoints" / name


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
                       patience=args.patience, shuffle=not args.no_shuffle, seed=args.train_seed,
                       optimizer=args.optimizer)


def _save_stage(run: Run, name: str, params: ParamSet, trace, extra: dict) -> None:
    ck = _checkpoint_path(run, name)
    ck.parent.mkdir(parents=True, exist_ok=True)
    params.save(ck)
    trace.to_csv(ck.with_name(name + "_log.csv"))
    summary = {"stopped_epoch": trace.stopped_epoch, "best_epoch": trace.best_epoch,
               "stop_reason": trace.stop_reason, **extra}
    ck.with_name(name + "_train.json").write_text(json.dumps(summary, indent=2) + "\n")
    run.produced(ck.with_suffix(".json"), ck.with_suffix(".bin"), ck.with_name(name + "_log.csv"),
                 ck.with_name(name + "_train.json"))
    print(f"{name}: {trace.stopped_epoch} epochs, stop_reason={trace.stop_reason}, best_epoch={trace.best_epoch}")


# ---------------------------------------------------------------- commands

def cmd_phantom(args, run: Run) -> None:
    raw = json.loads(Path(args.spec).read_text())
    entries = raw["datasets"] if isinstance(raw, dict) and "datasets" in raw else [raw]
    manifest = DatasetManifest()
    faults = []
    for i, rec in enumerate(entries):
        rec = dict(rec)
        tag = str(rec.pop("tag", chr(ord("A") + i)))
        if args.seed is not None:
            rec["seed"] = args.seed + i
        spec = PhantomSpec.from_dict(rec)
        run.settings[tag] = spec.to_dict()
        run.seeds[tag] = spec.seed
        cases = generate_dataset(spec, jobs=args.jobs)
        write_dataset(cases, run.out_dir / "phantom", tag, manifest, relative_to=run.out_dir)
        faults += [{"tag": tag, **f._asdict()} for c in cases for f in c.faults]
    mpath = run.path("manifest.json")
    manifest.save(mpath)
    fpath = run.path("phantom", "faults.json")
    fpath.write_text(json.dumps(faults, indent=1) + "\n")
    for e in manifest.entries:
        for p in (e.ct, e.lung, e.lesion):
            run.produced(run.out_dir / (p + ".json"), run.out_dir / (p + ".raw"))
    run.produced(mpath, fpath)
    print(f"wrote {len(manifest.entries)} volumes to {run.out_dir / 'phantom'}")


def cmd_lint(args, run: Run) -> None:
    manifest = DatasetManifest.load(args.manifest)
    findings = lint_manifest(manifest, args.min_component)
    out = run.path(args.output)
    write_lint_report(findings, out)
    run.produced(out)
    print(f"{len(findings)} lint findings -> {out}")


def cmd_preprocess(args, run: Run) -> None:
    manifest = DatasetManifest.load(args.manifest)
    if args.abort_on_lint:
        findings = lint_manifest(manifest, args.min_component)
        if findings:
            raise CommandError(f"{len(findings)} annotation lint findings (first: {findings[0].to_json()})")
    seed = args.seed if args.seed is not None else args.split_seed
    run.seeds["split"] = seed
    tags = args.tags or manifest.tags()
    for tag in tags:
        samples = build_samples(manifest, tag, args.side, jobs=args.jobs)
        spec = SplitSpec(args.train, args.val, args.ratio, seed, tuple(args.holdout_volumes))
        pairs = list(zip(samples.slide_ids, samples.has_lesion))
        tr, va, te = split_dataset(pairs, spec)
        d = _samples_dir(args, run) / tag
        samples.save(d)
        (d / "splits.json").write_text(json.dumps(
            {"spec": asdict(spec), "train": [list(s) for s in tr], "val": [list(s) for s in va],
             "test": [list(s) for s in te]}) + "\n")
        run.produced(*(d / f for f in ("inputs.npy", "targets.npy", "samples.json", "splits.json")))
        print(f"{tag}: {len(samples)} slides -> train {len(tr)}, val {len(va)}, test {len(te)}")


def cmd_train(args, run: Run) -> None:
    data = _load_splits(args, run, args.tag)
    side = data.train.inputs.shape[-1]
    unet = UNetConfig(input_channels=data.train.inputs.shape[1], output_channels=2, depth=args.depth,
                      base_width=args.base_width, image_side=side)
    cfg = _train_config(args)
    init_seed = args.seed if args.seed is not None else args.init_seed
    run.seeds.update(init=init_seed, train=cfg.seed)
    run.settings.update(unet=asdict(unet), train=asdict(cfg))
    params, trace = train(init_unet(unet, init_seed), data.train, data.val, cfg)
    _save_stage(run, args.name, params, trace, {"tag": args.tag, "parent": None})


def cmd_retrain(args, run: Run) -> None:
    src = _checkpoint_path(run, args.source)
    if not src.with_suffix(".json").exists():
        raise CommandError(f"checkpoint {args.source!r} not found at {src}")
    params = ParamSet.load(src)
    data = _load_splits(args, run, args.tag)
    cfg = _train_config(args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    run.seeds.update(train=cfg.seed)
    run.settings.update(train=asdict(cfg), source=args.source)
    params, trace = train(params, data.train, data.val, cfg)
    _save_stage(run, args.name, params, trace, {"tag": args.tag, "parent": args.source})


def cmd_evaluate(args, run: Run) -> None:
    src = _checkpoint_path(run, args.checkpoint)
    if not src.with_suffix(".json").exists():
        raise CommandError(f"checkpoint {args.checkpoint!r} not found at {src}")
    params = ParamSet.load(src)
    data = _load_splits(args, run, args.tag)
    split = getattr(data, args.split)
    if len(split) == 0:
        raise CommandError(f"{args.split} split of {args.tag!r} is empty")
    rows, _ = evaluate(params, split, args.threshold)
    out = run.path("metrics", f"{args.checkpoint}_Te{args.tag}.csv")
    agg = write_report(out, rows, split.has_lesion)
    run.produced(out)
    m = agg.mean
    print(f"{args.checkpoint} on {args.tag}: acc {m.accuracy:.6f} pre {m.precision:.6f} "
          f"rec {m.recall:.6f} f1 {m.f1:.6f} ({agg.count} lesion slides)")


def cmd_matrix(args, run: Run) -> None:
    plan = ExperimentPlan.load(args.plan)
    if args.seed is not None:
        plan.seeds = {"init": args.seed, "train": args.seed}
    tags = set(plan.stage_tags) | set(plan.test_tags)
    registry = {t: _load_splits(args, run, t) for t in sorted(tags)}
    any_set = registry[plan.train_tag].train
    unet = UNetConfig(input_channels=any_set.inputs.shape[1], depth=args.depth,
                      base_width=args.base_width, image_side=any_set.inputs.shape[-1])
    cfg = _train_config(args)
    run.seeds.update(plan.seeds)
    run.settings.update(plan=plan.to_dict(), unet=asdict(unet), train=asdict(cfg))
    lineage, matrix = run_experiment(plan, registry, unet, cfg, args.threshold,
                                     evaluate_stages=args.all_stages)
    out = run.path("matrix", Path(args.plan).stem + ".csv")
    matrix.to_csv(out)
    run.produced(out)
    for k, (p, trace) in enumerate(zip(lineage.checkpoints, lineage.logs)):
        _save_stage(run, f"{lineage.name}_stage{k}", p, trace, {"tag": plan.stage_tags[k], "stage": k})
    for r in matrix.rows:
        m = r.metrics
        print(f"{r.name:<24} Acc {m.accuracy:.6f} Pre {m.precision:.6f} Rec {m.recall:.6f} F1 {m.f1:.6f} n={r.count}")


def cmd_export3d(args, run: Run) -> None:
    ct = read_volume(args.ct)
    lung = read_volume(args.lung)
    mask = None
    if args.source != "ct":
        if args.mask:
            mask = read_volume(args.mask)
        elif args.checkpoint and args.source == "prediction":
            mask = _predict_volume(_checkpoint_path(run, args.checkpoint), ct, lung, args.threshold)
        else:
            raise CommandError(f"source {args.source!r} needs --mask (or --checkpoint for predictions)")
    rows = export_pointcloud(ct, lung, args.source, mask, args.spacing, args.nonzero_only)
    out = run.path(args.output)
    n = write_pointcloud_csv(rows, out)
    run.produced(out)
    print(f"{n} points -> {out}")


def _predict_volume(ckpt: Path, ct, lung, threshold: float) -> np.ndarray:
    if not ckpt.with_suffix(".json").exists():
        raise CommandError(f"checkpoint not found at {ckpt}")
    params = ParamSet.load(ckpt)
    side = params.config.image_side
    d, h, w = ct.shape
    inputs = np.stack([assemble_input(resize_nn(ct.voxels[s], side), resize_nn(lung.voxels[s], side))
                       for s in range(d)])
    pred = predict_mask(params, inputs, threshold)
    return np.stack([resize_nn(p, h) if h == w else _resize_rect(p, h, w) for p in pred])


def _resize_rect(img, h, w):
    rows = (np.arange(h) * img.shape[0]) // h
    cols = (np.arange(w) * img.shape[1]) // w
    return img[np.ix_(rows, cols)]


COMMANDS = {
    "phantom": cmd_phantom, "lint": cmd_lint, "preprocess": cmd_preprocess, "train": cmd_train,
    "retrain": cmd_retrain, "evaluate": cmd_evaluate, "matrix": cmd_matrix, "export3d": cmd_export3d,
}


# ---------------------------------------------------------------- parser

def _add_training(p, with_unet=True):
    if with_unet:
        p.add_argument("--depth", type=int, default=4, help="U-Net encoder/decoder levels")
        p.add_argument("--base-width", type=int, default=8, help="filters at the first level")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=45)
    p.add_argument("--epochs", type=int, default=200, help="maximum epochs")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--samples-dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=None, help="override every seed the command uses")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for slide-level work")
    parser.add_argument("--out-dir", default="ctlab-out", help=f"output directory (${ENV_OUT} overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic CT datasets")
    p.add_argument("spec", help="JSON phantom spec, or {\"datasets\": [...]} with one spec per tag")

    p = sub.add_parser("lint", help="flag suspicious lesion annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-component", type=int, default=10)
    p.add_argument("--output", default="lint.jsonl")

    p = sub.add_parser("preprocess", help="build 4-channel samples and train/val/test splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--side", type=int, default=320, help="resize slides to side x side")
    p.add_argument("--train", type=int, default=440)
    p.add_argument("--val", type=int, default=60)
    p.add_argument("--ratio", type=float, default=0.5, help="lesion fraction of train/val")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--tags", nargs="*", default=None)
    p.add_argument("--holdout-volumes", type=int, nargs="*", default=[])
    p.add_argument("--abort-on-lint", action="store_true")
    p.add_argument("--min-component", type=int, default=10)
    p.add_argument("--samples-dir", default=None)

    p = sub.add_parser("train", help="train a U-Net from scratch on one dataset")
    p.add_argument("--tag", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--init-seed", type=int, default=0)
    _add_training(p)

    p = sub.add_parser("retrain", help="continue training a checkpoint on another dataset")
    p.add_argument("--from", dest="source", required=True, help="checkpoint name")
    p.add_argument("--tag", required=True)
    p.add_argument("--name", required=True)
    _add_training(p, with_unet=False)

    p = sub.add_parser("evaluate", help="per-slice metrics of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tag", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--samples-dir", default=None)

    p = sub.add_parser("matrix", help="run a train/retrain/test plan and write its results matrix")
    p.add_argument("plan")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--all-stages", action="store_true", help="score the test sets after every stage")
    _add_training(p)

    p = sub.add_parser("export3d", help="write a lung-area point cloud CSV")
    p.add_argument("--ct", required=True)
    p.add_argument("--lung", required=True)
    p.add_argument("--source", choices=("ct", "ground_truth", "prediction"), default="ct")
    p.add_argument("--mask", default=None, help="mask volume for ground_truth/prediction sources")
    p.add_argument("--checkpoint", default=None, help="predict the mask with this checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--spacing", type=float, default=None, help="z step per slide (default: header)")
    p.add_argument("--nonzero-only", action="store_true")
    p.add_argument("--output", default="pointcloud.csv")

    p = sub.add_parser("replay", help="re-execute a run manifest")
    p.add_argument("manifest")
    return parser


# ---------------------------------------------------------------- entry point

def _manifest_path(out_dir: Path, command: str, argv) -> Path:
    digest = hashlib.sha1(json.dumps(list(argv)).encode()).hexdigest()[:12]
    return out_dir / "runs" / f"{command}-{digest}.json"


def _strip_out_dir(argv: list) -> list:
    """Drop global ``--out-dir`` options that precede the subcommand."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in COMMANDS or a == "replay":
            return out + argv[i:]
        if a == "--out-dir":
            i += 2
            continue
        if a.startswith("--out-dir="):
            i += 1
            continue
        out.append(a)
        i += 1
    return out


def replay(manifest_path) -> int:
    rec = json.loads(Path(manifest_path).read_text())
    saved = os.environ.pop(ENV_OUT, None)
    cwd = os.getcwd()
    try:
        os.chdir(rec["cwd"])
        return main(rec["argv"])
    finally:
        os.chdir(cwd)
        if saved is not None:
            os.environ[ENV_OUT] = saved


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        if args.command == "replay":
            return replay(args.manifest)
        out_dir = Path(os.environ.get(ENV_OUT) or args.out_dir).resolve()
        out_dir.mkdir(parents=True, exist_ok=True)
        run = Run(out_dir, args.command)
        started = time.time()
        COMMANDS[args.command](args, run)
        # the effective output directory is pinned so replays do not depend on the environment
        effective = ["--out-dir", str(out_dir)] + _strip_out_dir(argv)
        record = {
            "command": args.command,
            "argv": effective,
            "arguments": {k: v for k, v in vars(args).items()},
            "settings": run.settings,
            "seeds": run.seeds,
            "artifacts": run.artifacts,
            "cwd": os.getcwd(),
            "version": __version__,
            "started": started,
            "finished": time.time(),
        }
        mpath = _manifest_path(out_dir, args.command, effective)
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(json.dumps(record, indent=2, default=str) + "\n")
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes a diagnostic line and exit 1
        print(f"ctlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
