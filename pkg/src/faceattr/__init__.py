"""faceattr: residual-network attribute classifiers on a numpy autodiff core."""

from .data import (AttributeSchema, AugmentConfig, CelebA, CropRule,
                   DataSource, SampleRecord, SplitSpec, augment,
                   batch_iterator, decode_image, default_schema, gen_synthetic,
                   load_celeba, load_manifest, load_schema, padded_crop,
                   resize_rescale, save_manifest, save_schema, split_manifest)
from .model import (HeadSpec, Model, NetworkSpec, StageSpec, StemSpec,
                    preset_spec, small_spec)
from .optim import (AdamConfig, AdamState, MetricAccumulator, accuracy,
                    adam_step, binary_crossentropy, categorical_crossentropy,
                    sigmoid_binary_cross_entropy, softmax_cross_entropy)
from .tensor import ComputeGraph, GradCheckReport, Tensor, backward, grad_check
from .train import (Checkpoint, EvalReport, TrainConfig, evaluate,
                    export_history, load_checkpoint, parse_history,
                    report_jsonl, report_table, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AttributeSchema", "AugmentConfig", "CelebA", "CropRule", "DataSource",
    "SampleRecord", "SplitSpec", "augment", "batch_iterator", "decode_image",
    "default_schema", "gen_synthetic", "load_celeba", "load_manifest",
    "load_schema", "padded_crop", "resize_rescale", "save_manifest",
    "save_schema", "split_manifest",
    "HeadSpec", "Model", "NetworkSpec", "StageSpec", "StemSpec",
    "preset_spec", "small_spec",
    "AdamConfig", "AdamState", "MetricAccumulator", "accuracy", "adam_step",
    "binary_crossentropy", "categorical_crossentropy",
    "sigmoid_binary_cross_entropy", "softmax_cross_entropy",
    "ComputeGraph", "GradCheckReport", "Tensor", "backward", "grad_check",
    "Checkpoint", "EvalReport", "TrainConfig", "evaluate", "export_history",
    "load_checkpoint", "parse_history", "report_jsonl", "report_table",
    "save_checkpoint", "train",
    "__version__",
]
