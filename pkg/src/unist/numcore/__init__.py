"""Minimal float64 tensor engine with reverse-mode autodiff."""

from .counter import FlopCounter, OpRecord, label
from .gradcheck import grad_check
from .ops import (
    INSTANCE_NORM_EPS,
    LAYER_NORM_EPS,
    avg_pool2,
    conv2d,
    gelu,
    instance_stats,
    l2_norm,
    layer_norm,
    linear,
    matmul,
    pointwise_conv,
    softmax,
    upsample_nearest2,
)
from .rng import Rng, init_uniform
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clamp_min,
    concat,
    div,
    exp,
    is_grad_enabled,
    log,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sqrt,
    sub,
    transpose,
)
