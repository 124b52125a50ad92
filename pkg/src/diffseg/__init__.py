"""Frozen diffusion-UNet features + a trainable FCN head for tiled image segmentation."""

from .backbone import (Backbone, BackboneDescriptor, BlockActivation, ConditioningVector,
                       build_toy_backbone, full_scale_descriptor, load_backbone, save_backbone)
from .errors import DiffSegError
from .features import FeatureMap, bilinear_upsample, extract_features
from .grid import PatchGrid, extract_image_features, stitch_features, tile
from .head import FCNHead, build_head, head_forward, predict_mask
from .metrics import ConfusionMatrix, MetricsReport, accumulate, report
from .schedule import Latent, NoiseSchedule, build_schedule, noise_latent
from .training import ClassWeights, TrainConfig, compute_class_weights, train_head, weighted_ce_loss

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneDescriptor", "BlockActivation", "ConditioningVector", "ClassWeights",
    "ConfusionMatrix", "DiffSegError", "FCNHead", "FeatureMap", "Latent", "MetricsReport",
    "NoiseSchedule", "PatchGrid", "TrainConfig", "accumulate", "bilinear_upsample", "build_head",
    "build_schedule", "build_toy_backbone", "compute_class_weights", "extract_features",
    "extract_image_features", "full_scale_descriptor", "head_forward", "load_backbone",
    "noise_latent", "predict_mask", "report", "save_backbone", "stitch_features", "tile",
    "train_head", "weighted_ce_loss",
]
