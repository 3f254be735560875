"""A small deterministic tensor/autodiff engine for the segmentation networks."""

from mieval.nn.functional import (
    batch_norm,
    combined_loss,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    dice_loss,
    elu,
    maxpool2,
    one_hot,
    se_block,
    softmax_channels,
    upconv2,
)
from mieval.nn.optim import Adam, AdamState, adam_step, he_init
from mieval.nn.tensor import ShapeError, Tensor, no_grad

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "conv2d",
    "elu",
    "batch_norm",
    "se_block",
    "maxpool2",
    "upconv2",
    "concat_channels",
    "softmax_channels",
    "dice_loss",
    "cross_entropy_loss",
    "combined_loss",
    "one_hot",
    "he_init",
    "adam_step",
    "AdamState",
    "Adam",
]
