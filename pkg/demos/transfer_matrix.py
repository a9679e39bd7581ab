"""
Sequential retraining and forgetting
====================================

Train on dataset A, retrain on an intensity-shifted dataset B, and watch
the score on A move while B improves.
"""

import tempfile

from ctlab import PhantomSpec, SplitSpec, TrainConfig, UNetConfig, build_samples, generate_dataset, write_dataset
from ctlab.transfer import DatasetSplits, ExperimentPlan, forgetting_delta, run_experiment

root = tempfile.mkdtemp()
registry = {}
for tag, shift in (("A", 0), ("B", 120)):
    spec = PhantomSpec(side=32, depth=24, volumes=10, shift=shift, lesion_hu_center=-380,
                       lesion_hu_spread=150, lesion_slide_prob=0.8, seed=ord(tag))
    manifest = write_dataset(generate_dataset(spec), root, tag)
    registry[tag] = DatasetSplits.from_samples(build_samples(manifest, tag, 32), SplitSpec(120, 30, 0.5, 0))

plan = ExperimentPlan("A", ["B"], ["A", "B"], stage_epochs=[30, 15])
lineage, matrix = run_experiment(plan, registry, UNetConfig(depth=2, base_width=8, image_side=32),
                                 TrainConfig(learning_rate=3e-3, batch_size=16, patience=10),
                                 evaluate_stages=True)

for row in matrix.rows:
    m = row.metrics
    print(f"{row.name:16s} acc {m.accuracy:.3f} pre {m.precision:.3f} rec {m.recall:.3f} f1 {m.f1:.3f}")
print("forgetting on A:", round(forgetting_delta(matrix.select("TrA_R_None"), matrix.select("TrA_R_B"), "A"), 3))
