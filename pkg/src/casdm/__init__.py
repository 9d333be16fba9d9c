"""Class-aware semantic diffusion for imbalanced segmentation datasets."""

from casdm.diffusion import (
    NoiseSchedule,
    fast_sample,
    forward_sample,
    make_schedule,
    reconstruct_x0,
    reverse_step,
)
from casdm.weights import ClassWeights, compute_class_weights, expand_to_weight_image, pool_weights

__version__ = "0.1.0"

__all__ = [
    "ClassWeights",
    "NoiseSchedule",
    "compute_class_weights",
    "expand_to_weight_image",
    "fast_sample",
    "forward_sample",
    "make_schedule",
    "pool_weights",
    "reconstruct_x0",
    "reverse_step",
]
