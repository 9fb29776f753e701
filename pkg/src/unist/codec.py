"""
Toy image codec: a frozen multi-scale conv encoder and a learnable decoder.

The encoder is four conv3x3+relu stages with 2x average pooling between
them, so its taps sit at strides 1, 2, 4 and 8. The last tap, read as a
(B, H/8, W/8, D) grid, is what the transformer sees. The decoder mirrors it
with nearest-neighbour upsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dit import GridKind, TokenGrid
from .errors import ShapeError
from .numcore import Rng, Tensor, avg_pool2, conv2d, init_uniform, relu, upsample_nearest2


@dataclass
class Conv3x3:
    w: Tensor  # (O, C, 3, 3)
    b: Tensor

    @classmethod
    def init(cls, rng: Rng, c_in: int, c_out: int, trainable: bool) -> "Conv3x3":
        # He-uniform weights and zero biases keep rectifier stacks alive through depth
        fan_in = 9 * c_in
        return cls(
            init_uniform(rng, (c_out, c_in, 3, 3), fan_in, requires_grad=trainable, gain=math.sqrt(6.0)),
            Tensor(np.zeros(c_out), requires_grad=trainable),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=1, pad=1)


@dataclass
class FeatureTaps:
    phi1: Tensor
    phi2: Tensor
    phi3: Tensor
    phi4: Tensor

    def as_list(self) -> list:
        return [self.phi1, self.phi2, self.phi3, self.phi4]


@dataclass
class EncoderStack:
    convs: list  # 4 x Conv3x3, frozen

    @classmethod
    def init(cls, rng: Rng, channels: int, dim: int) -> "EncoderStack":
        widths = [3, channels, 2 * channels, 4 * channels, dim]
        return cls([Conv3x3.init(rng, a, b, trainable=False) for a, b in zip(widths, widths[1:])])


@dataclass
class DecoderStack:
    convs: list  # 3 upsampling stages, then the 3-channel output conv

    @classmethod
    def init(cls, rng: Rng, channels: int, dim: int) -> "DecoderStack":
        widths = [dim, 4 * channels, 2 * channels, channels, 3]
        return cls([Conv3x3.init(rng, a, b, trainable=True) for a, b in zip(widths, widths[1:])])


@dataclass
class CodecParams:
    encoder: EncoderStack
    decoder: DecoderStack

    @classmethod
    def init(cls, rng: Rng, channels: int = 4, dim: int = 16) -> "CodecParams":
        # separate streams so decoder init does not depend on encoder shape
        return cls(
            EncoderStack.init(rng.spawn(1), channels, dim),
            DecoderStack.init(rng.spawn(2), channels, dim),
        )

    @property
    def dim(self) -> int:
        return self.encoder.convs[-1].w.shape[0]


def encode(images: Tensor, params: CodecParams) -> FeatureTaps:
    """Multi-scale relu taps of a (B, 3, H, W) batch; H and W must divide by 8."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"encode expects (B, 3, H, W) images, got {images.shape}")
    H, W = images.shape[2:]
    if H % 8 or W % 8:
        raise ShapeError(f"image size {H}x{W} is not divisible by 8")
    c1, c2, c3, c4 = params.encoder.convs
    phi1 = relu(c1(images))
    phi2 = relu(c2(avg_pool2(phi1)))
    phi3 = relu(c3(avg_pool2(phi2)))
    phi4 = relu(c4(avg_pool2(phi3)))
    return FeatureTaps(phi1, phi2, phi3, phi4)


def tokenize(taps: FeatureTaps, kind: GridKind = GridKind.CONTENT) -> TokenGrid:
    """(B, D, h, w) deepest tap -> (T=B, h, w, D) token grid."""
    return TokenGrid(taps.phi4.transpose(0, 2, 3, 1), kind)


def untokenize(grid: TokenGrid) -> Tensor:
    return grid.data.transpose(0, 3, 1, 2)


def decode(tokens: TokenGrid, params: CodecParams) -> Tensor:
    """Token grid back to raw (B, 3, 8h, 8w) pixels; no clamping."""
    if tokens.shape[-1] != params.dim:
        raise ShapeError(f"token dim {tokens.shape[-1]} does not match codec dim {params.dim}")
    x = untokenize(tokens)
    *stages, out = params.decoder.convs
    for conv in stages:
        x = relu(conv(upsample_nearest2(x)))
    return out(x)
