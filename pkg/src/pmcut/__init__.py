"""Embedded-space point swapping augmentation for point-cloud networks, in numpy."""
from .augment import (AugmentConfig, BatchMixer, MixedTargets, ReplacementMask, apply_pmc,
                      build_mask_knn, build_mask_random, gate, mix_class_targets,
                      mix_point_targets, pmc_batch, sample_lambda)
from .core import (Batch, ConfigError, FeatureBatch, InvalidInputError, PointCloud, RngStream,
                   normalize_unit_sphere, one_hot, pairwise_sq_dist, rng_stream)
from .data import Dataset, ShapeSpec, build_dataset, gen_shape, read_pcb, write_pcb
from .network import HookPoint, PointModel, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, Trainer, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BatchMixer", "MixedTargets", "ReplacementMask", "apply_pmc", "build_mask_knn",
    "build_mask_random", "gate", "mix_class_targets", "mix_point_targets", "pmc_batch", "sample_lambda",
    "Batch", "ConfigError", "FeatureBatch", "InvalidInputError", "PointCloud", "RngStream",
    "normalize_unit_sphere", "one_hot", "pairwise_sq_dist", "rng_stream",
    "Dataset", "ShapeSpec", "build_dataset", "gen_shape", "read_pcb", "write_pcb",
    "HookPoint", "PointModel", "build_model", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "Trainer", "gradient_check", "train",
]
