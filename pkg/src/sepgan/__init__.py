"""sepgan: conditional image-translation GANs from standard vs depthwise
separable convolutions, with static cost accounting and Frechet-distance
evaluation of generated image distributions."""

from .rng import Rng
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    bce_with_logits,
    concat_channels,
    conv2d,
    conv_transpose2d,
    depthwise_conv2d,
    depthwise_conv_transpose2d,
    instance_norm,
    l1,
    leaky_relu,
    mean,
    pointwise_conv2d,
    relu,
    scalar,
    scale,
    softmax_cross_entropy,
    tanh,
)

__version__ = "0.1.0"
