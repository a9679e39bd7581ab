"""CT lesion segmentation pipeline: HU windowing, a numpy U-Net and a sequential transfer harness."""

__version__ = "0.1.0"

from .volume_io import HounsfieldVolume, MaskVolume, VolumeHeader, read_volume, validate_pair, write_volume
from .preprocess import (DEFAULT_WINDOWS, ChannelBank, DatasetManifest, Sample, SampleSet, SplitSpec, WindowSpec, assemble_input,
                         assemble_target, build_samples, filter_slides, lint_annotations, resize_nn, split_dataset,
                         window_normalize)
from .segnet import ParamSet, TrainConfig, TrainLog, UNetConfig, backward, forward, init_unet, loss, predict_mask, train
from .metrics import ConfusionCounts, SliceMetrics, aggregate, confusion, evaluate_masks, slice_metrics
from .transfer import ExperimentPlan, ResultsMatrix, forgetting_delta, plan_name, run_experiment
from .phantom import PhantomSpec, generate_dataset, generate_volume, write_dataset
from .viz_export import export_pointcloud, write_pointcloud_csv
