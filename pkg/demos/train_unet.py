"""
Training the numpy U-Net
========================

A depth-2 U-Net learns to segment lesions on 32x32 phantom slides.
Everything, including backpropagation, is plain numpy.
"""

import logging
import tempfile

from ctlab import (PhantomSpec, SplitSpec, TrainConfig, UNetConfig, aggregate, build_samples,
                   evaluate_masks, generate_dataset, init_unet, predict_mask, train, write_dataset)
from ctlab.transfer import DatasetSplits

logging.basicConfig(level=logging.INFO, format="%(message)s")

spec = PhantomSpec(side=32, depth=24, volumes=10, lesion_slide_prob=0.8, seed=2)
manifest = write_dataset(generate_dataset(spec), tempfile.mkdtemp(), "A")
splits = DatasetSplits.from_samples(build_samples(manifest, "A", 32), SplitSpec(120, 30, 0.5, seed=0))
print("slides: train", len(splits.train), "val", len(splits.val), "test", len(splits.test))

net = UNetConfig(depth=2, base_width=8, image_side=32)
params = init_unet(net, seed=0)
print("parameters:", params.num_params())

cfg = TrainConfig(learning_rate=3e-3, batch_size=16, max_epochs=30, patience=5)
params, log = train(params, splits.train, splits.val, cfg)
print("stopped:", log.stop_reason, "best epoch", log.best_epoch)

pred = predict_mask(params, splits.test.inputs)
rows = evaluate_masks(pred, splits.test.targets[:, 0], splits.test.slide_ids)
print("test mean over lesion slides:", aggregate(rows, splits.test.has_lesion))
