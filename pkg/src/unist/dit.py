"""
Domain interaction transformer.

Pipeline: content and style each pass their own stack of self-attention
encoder blocks; the content sequence (first half video, second half images)
then goes through two cross-attention encoder blocks, video attending to
images and images attending to video; finally decoder blocks attend from
content to style.

The frame axis is batch-like everywhere: attention only ever runs inside one
frame's H x W grid. Frames exchange information solely through which grid
supplies the keys/values in the interaction stage.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AmsaParams, AmsaVariant, amsa
from .errors import ConfigError, ShapeError
from .numcore import Rng, Tensor, concat, gelu, init_uniform, label, layer_norm, linear, pointwise_conv


class GridKind(enum.Enum):
    CONTENT = "content"
    STYLE = "style"
    STYLIZED = "stylized"


@dataclass
class TokenGrid:
    data: Tensor  # (T, H, W, D)
    kind: GridKind

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"token grid must be (T, H, W, D), got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class DitConfig:
    n_c: int = 2
    n_s: int = 1
    n_t: int = 3
    embed_dim: int = 16
    heads: int = 2
    interaction_enabled: bool = True
    unimodal: bool = False
    variant: AmsaVariant = AmsaVariant.STANDARD

    def __post_init__(self):
        if min(self.n_c, self.n_s, self.n_t) < 1:
            raise ConfigError(f"block counts must be >= 1, got {(self.n_c, self.n_s, self.n_t)}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @classmethod
    def full_scale(cls, **kw) -> "DitConfig":
        return cls(embed_dim=512, heads=8, **kw)

    _VARIANTS = list(AmsaVariant)

    def to_ints(self) -> list[int]:
        """Checkpoint header encoding."""
        return [
            self.n_c, self.n_s, self.n_t, self.embed_dim, self.heads,
            int(self.interaction_enabled), int(self.unimodal), self._VARIANTS.index(self.variant),
        ]

    @classmethod
    def from_ints(cls, vals) -> "DitConfig":
        if len(vals) != 8 or vals[7] >= len(cls._VARIANTS):
            raise ConfigError(f"bad config header {list(vals)}")
        n_c, n_s, n_t, d, h, inter, uni, var = vals
        return cls(n_c, n_s, n_t, d, h, bool(inter), bool(uni), cls._VARIANTS[var])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Conv1x1:
    w: Tensor  # (O, C, 1, 1)
    b: Optional[Tensor] = None

    @classmethod
    def init(cls, rng: Rng, c_in: int, c_out: int, bias: bool = True) -> "Conv1x1":
        w = init_uniform(rng, (c_out, c_in, 1, 1), c_in)
        return cls(w, init_uniform(rng, (c_out,), c_in) if bias else None)


@dataclass
class FFNParams:
    w1: Tensor  # (D, 4D)
    b1: Tensor
    w2: Tensor  # (4D, D)
    b2: Tensor

    @classmethod
    def init(cls, rng: Rng, dim: int) -> "FFNParams":
        hidden = 4 * dim
        return cls(
            init_uniform(rng, (dim, hidden), dim),
            init_uniform(rng, (hidden,), dim),
            init_uniform(rng, (hidden, dim), hidden),
            init_uniform(rng, (dim,), hidden),
        )


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNormParams":
        return cls(Tensor(np.ones(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))


@dataclass
class AttnBranch:
    """Pointwise Q/K/V convolutions feeding one axial attention layer.

    The key conv has no bias: a bias shared by every key shifts all scores of
    a query equally and softmax cancels it.
    """

    conv_q: Conv1x1
    conv_k: Conv1x1
    conv_v: Conv1x1
    amsa: AmsaParams

    @classmethod
    def init(cls, rng: Rng, dim: int, heads: int) -> "AttnBranch":
        return cls(
            Conv1x1.init(rng, dim, dim),
            Conv1x1.init(rng, dim, dim, bias=False),
            Conv1x1.init(rng, dim, dim),
            AmsaParams.init(rng, dim, heads),
        )


@dataclass
class EncoderParams:
    attn: AttnBranch
    norm1: LayerNormParams
    ffn: FFNParams
    norm2: LayerNormParams

    @classmethod
    def init(cls, rng: Rng, dim: int, heads: int) -> "EncoderParams":
        return cls(AttnBranch.init(rng, dim, heads), LayerNormParams.init(dim), FFNParams.init(rng, dim), LayerNormParams.init(dim))


@dataclass
class DecoderParams:
    attn1: AttnBranch
    norm1: LayerNormParams
    attn2: AttnBranch
    norm2: LayerNormParams
    ffn: FFNParams
    norm3: LayerNormParams

    @classmethod
    def init(cls, rng: Rng, dim: int, heads: int) -> "DecoderParams":
        return cls(
            AttnBranch.init(rng, dim, heads),
            LayerNormParams.init(dim),
            AttnBranch.init(rng, dim, heads),
            LayerNormParams.init(dim),
            FFNParams.init(rng, dim),
            LayerNormParams.init(dim),
        )


@dataclass
class DitParams:
    content_enc: list = field(default_factory=list)
    style_enc: list = field(default_factory=list)
    interaction: list = field(default_factory=list)  # [video->image, image->video]
    decoder: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: DitConfig, rng: Rng) -> "DitParams":
        d, h = cfg.embed_dim, cfg.heads
        return cls(
            [EncoderParams.init(rng, d, h) for _ in range(cfg.n_c)],
            [EncoderParams.init(rng, d, h) for _ in range(cfg.n_s)],
            [EncoderParams.init(rng, d, h) for _ in range(2)],
            [DecoderParams.init(rng, d, h) for _ in range(cfg.n_t)],
        )

    def check(self, cfg: DitConfig) -> None:
        counts = (len(self.content_enc), len(self.style_enc), len(self.interaction), len(self.decoder))
        if counts != (cfg.n_c, cfg.n_s, 2, cfg.n_t):
            raise ConfigError(f"parameter block counts {counts} do not match config {cfg}")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def pointwise(x: Tensor, conv: Conv1x1) -> Tensor:
    """1x1 convolution applied to a channels-last grid."""
    with label("conv1x1"):
        return pointwise_conv(x, conv.w, conv.b)


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    with label("ffn"):
        return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def _norm(x: Tensor, p: LayerNormParams) -> Tensor:
    with label("layer_norm"):
        return layer_norm(x, p.gamma, p.beta)


def _attend(q: Tensor, kv: Tensor, br: AttnBranch, variant: AmsaVariant) -> Tensor:
    return amsa(pointwise(q, br.conv_q), pointwise(kv, br.conv_k), pointwise(kv, br.conv_v), br.amsa, variant)


def _check_pair(q: Tensor, kv: Tensor):
    if q.ndim != 4 or kv.ndim != 4 or q.shape[1:] != kv.shape[1:]:
        raise ShapeError(f"grids must share H, W, D: {q.shape} vs {kv.shape}")
    if kv.shape[0] not in (1, q.shape[0]):
        raise ShapeError(f"key/value grid must have 1 or {q.shape[0]} frames, got {kv.shape[0]}")


def encoder_block(x_q: Tensor, x_kv: Tensor, p: EncoderParams, variant: AmsaVariant = AmsaVariant.STANDARD) -> Tensor:
    """Attention sublayer then FFN sublayer, each residual and layer-normed.

    Self-attention is ``x_kv is x_q``.
    """
    _check_pair(x_q, x_kv)
    s = _norm(_attend(x_q, x_kv, p.attn, variant) + x_q, p.norm1)
    return _norm(ffn(s, p.ffn) + s, p.norm2)


def decoder_block(content: Tensor, style: Tensor, p: DecoderParams, variant: AmsaVariant = AmsaVariant.STANDARD) -> Tensor:
    """Two content-to-style attention sublayers then an FFN, each residual and layer-normed."""
    _check_pair(content, style)
    s2 = _norm(_attend(content, style, p.attn1, variant) + content, p.norm1)
    s1 = _norm(_attend(s2, style, p.attn2, variant) + s2, p.norm2)
    return _norm(ffn(s1, p.ffn) + s1, p.norm3)


def video_image_interaction(seq: Tensor, blocks: list, cfg: DitConfig) -> Tensor:
    """Cross-attend the video half and the image half of a content sequence.

    Unimodal input runs the first block as self-attention over the whole sequence.
    """
    if not cfg.interaction_enabled:
        return seq
    if cfg.unimodal:
        return encoder_block(seq, seq, blocks[0], cfg.variant)
    t = seq.shape[0]
    if t % 2:
        raise ConfigError(f"bimodal interaction needs an even frame count, got {t}")
    video, image = seq[: t // 2], seq[t // 2 :]
    out_v = encoder_block(video, image, blocks[0], cfg.variant)
    out_i = encoder_block(image, video, blocks[1], cfg.variant)
    return concat([out_v, out_i], axis=0)


def dit_forward(content: TokenGrid, style: TokenGrid, cfg: DitConfig, params: DitParams) -> TokenGrid:
    if content.kind is not GridKind.CONTENT or style.kind is not GridKind.STYLE:
        raise ConfigError(f"dit_forward expects (content, style) grids, got ({content.kind}, {style.kind})")
    d = cfg.embed_dim
    if content.shape[-1] != d or style.shape[-1] != d:
        raise ShapeError(f"token dim must be {d}: content {content.shape}, style {style.shape}")
    if style.shape[0] not in (1, content.shape[0]):
        raise ShapeError(f"style grid must have 1 or {content.shape[0]} frames, got {style.shape[0]}")
    params.check(cfg)

    c = content.data
    for blk in params.content_enc:
        c = encoder_block(c, c, blk, cfg.variant)
    s = style.data
    for blk in params.style_enc:
        s = encoder_block(s, s, blk, cfg.variant)
    c = video_image_interaction(c, params.interaction, cfg)
    for blk in params.decoder:
        c = decoder_block(c, s, blk, cfg.variant)
    return TokenGrid(c, GridKind.STYLIZED)
