"""Gradient-attention guided network for fine-grained image classification."""

from .attention import attention_enhance, attention_map, channel_importance, ia_forward
from .config import RunConfig, ScheduleStep
from .model import GuidedNet, StageOutputs, combined_prediction
from .patch_shuffle import PermutationPair, ShuffleSpec, make_permutation, shuffle_image, verify_pair
from .training import cross_entropy, kd_loss, progressive_step, train

__all__ = [
    "attention_enhance",
    "attention_map",
    "channel_importance",
    "ia_forward",
    "RunConfig",
    "ScheduleStep",
    "GuidedNet",
    "StageOutputs",
    "combined_prediction",
    "PermutationPair",
    "ShuffleSpec",
    "make_permutation",
    "shuffle_image",
    "verify_pair",
    "cross_entropy",
    "kd_loss",
    "progressive_step",
    "train",
]

__version__ = "0.1.0"
