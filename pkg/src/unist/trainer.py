"""
Toy overfitting loop: a tiny DIT plus decoder fitted to one procedural batch.

Each step runs three forwards through the same weights:

* stylized: content sequence attends to the style image
* content identity: the content sequence is its own style (T' = T)
* style identity: the style image as a one-frame content sequence, run
  through the unimodal interaction path

then momentum SGD on the decoder and DIT parameters. The feature encoder is
frozen throughout.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import CodecParams, FeatureTaps, decode, encode, tokenize
from .dit import DitConfig, DitParams, GridKind, TokenGrid, dit_forward
from .errors import ConfigError, DivergenceError, NonFiniteError
from .losses import (
    LossParts,
    LossWeights,
    content_loss,
    identity_loss,
    style_loss,
    temporal_loss,
    total_loss,
)
from .numcore import Rng, Tensor, backward, no_grad
from .params import CheckpointError, assign, load_checkpoint, named_tensors, save_checkpoint

IMAGE_SIZE = 64
DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    momentum: float = 0.9
    clip_norm: float = 5.0  # global gradient norm cap; 0 disables
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    dit: DitConfig = field(default_factory=DitConfig)
    n_video: int = 2
    n_image: int = 2
    codec_channels: int = 4

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not self.clip_norm >= 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.n_video < 2 or self.n_video != self.n_image:
            raise ConfigError(f"need >= 2 video frames and as many images, got {self.n_video}+{self.n_image}")
        if self.dit.unimodal:
            raise ConfigError("training runs the bimodal content sequence; unimodal is used only for the style identity pass")


# ---------------------------------------------------------------------------
# procedural data
# ---------------------------------------------------------------------------


def _grid01(size):
    y, x = np.mgrid[0:size, 0:size] / (size - 1)
    return y, x


def _pattern(rng: Rng, size: int) -> np.ndarray:
    """Seeded blend of a colour gradient, a checkerboard and smooth noise; values in [0, 1]."""
    y, x = _grid01(size)
    a, b = rng.uniform(3, 0.0, 1.0), rng.uniform(3, 0.0, 1.0)
    grad = a[:, None, None] * x + b[:, None, None] * (1 - y)
    period = int(rng.choice(4, 1)[0]) * 4 + 4
    checker = ((np.arange(size)[:, None] // period + np.arange(size)[None, :] // period) % 2).astype(float)
    coarse = rng.uniform((3, size // 8, size // 8))
    noise = coarse.repeat(8, 1).repeat(8, 2)
    w = rng.uniform(3)
    w = w / w.sum()
    img = w[0] * grad / 2 + w[1] * checker[None] * rng.uniform((3, 1, 1)) + w[2] * noise
    return np.clip(img, 0.0, 1.0)


def _shifted(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    return np.roll(img, (dy, dx), axis=(1, 2))


@dataclass
class Batch:
    content: np.ndarray  # (n_video + n_image, 3, S, S); video frames first
    style: np.ndarray  # (1, 3, S, S)
    n_video: int


def toy_batch(seed: int, n_video: int = 2, n_image: int = 2, size: int = IMAGE_SIZE) -> Batch:
    """Video frames are small translations of one pattern; images and style are independent draws."""
    rng = Rng(seed).spawn(7)
    base = _pattern(rng, size)
    video = [_shifted(base, 2 * i, i) for i in range(n_video)]
    images = [_pattern(rng, size) for _ in range(n_image)]
    style = _pattern(rng, size)
    return Batch(np.stack(video + images), style[None], n_video)


# ---------------------------------------------------------------------------
# model construction and checkpoints
# ---------------------------------------------------------------------------


def init_model(cfg: DitConfig, seed: int, codec_channels: int = 4) -> tuple[CodecParams, DitParams]:
    rng = Rng(seed)
    return CodecParams.init(rng.spawn(11), codec_channels, cfg.embed_dim), DitParams.init(cfg, rng.spawn(12))


def save_model(path, cfg: DitConfig, codec: CodecParams, dit: DitParams) -> None:
    """Checkpoint holding the frozen encoder too, so a file fully determines the model."""
    save_checkpoint(path, cfg.to_ints(), dict(named_tensors({"codec": codec, "dit": dit})))


def load_model(path) -> tuple[DitConfig, CodecParams, DitParams]:
    ints, arrays = load_checkpoint(path)
    cfg = DitConfig.from_ints(ints)
    first = arrays.get("codec.encoder.convs.0.w")
    if first is None:
        raise CheckpointError(f"{path}: no codec tensors")
    codec, dit = init_model(cfg, 0, first.shape[0])
    assign({"codec": codec, "dit": dit}, arrays)
    return cfg, codec, dit


# ---------------------------------------------------------------------------
# state and step
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    codec: CodecParams
    dit: DitParams
    velocity: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, cfg: TrainConfig) -> "TrainState":
        return cls(cfg, *init_model(cfg.dit, cfg.seed, cfg.codec_channels))

    def trainable(self) -> list[tuple[str, Tensor]]:
        named = [("decoder." + n, t) for n, t in named_tensors(self.codec.decoder)]
        named += [("dit." + n, t) for n, t in named_tensors(self.dit)]
        return [(n, t) for n, t in named if t.requires_grad]

    def frozen(self) -> list[tuple[str, Tensor]]:
        return [("encoder." + n, t) for n, t in named_tensors(self.codec.encoder)]


def _frames(taps: FeatureTaps, i: int) -> FeatureTaps:
    return FeatureTaps(*(t[i : i + 1] for t in taps.as_list()))


def _stylize(content: TokenGrid, style: TokenGrid, cfg: DitConfig, state: TrainState) -> Tensor:
    return decode(dit_forward(content, style, cfg, state.dit), state.codec)


def forward_losses(state: TrainState, batch: Batch) -> LossParts:
    cfg = state.cfg
    codec = state.codec
    c_img, s_img = Tensor(batch.content), Tensor(batch.style)
    taps_c, taps_s = encode(c_img, codec), encode(s_img, codec)
    c_tok, s_tok = tokenize(taps_c), tokenize(taps_s, GridKind.STYLE)

    cs = _stylize(c_tok, s_tok, cfg.dit, state)
    taps_cs = encode(cs, codec)
    cc = _stylize(c_tok, TokenGrid(c_tok.data, GridKind.STYLE), cfg.dit, state)
    ss = _stylize(TokenGrid(s_tok.data, GridKind.CONTENT), s_tok, replace(cfg.dit, unimodal=True), state)

    l_c = content_loss(taps_cs, taps_c)
    l_s = style_loss(taps_cs, taps_s)
    l_id = identity_loss(cc, c_img, ss, s_img, encode(cc, codec), taps_c, encode(ss, codec), taps_s, cfg.weights)
    return LossParts(l_c, l_s, l_id, temporal_term(taps_c, taps_cs, batch.n_video))


def temporal_term(taps_c: FeatureTaps, taps_cs: FeatureTaps, n_video: int) -> Tensor:
    """Temporal loss summed over consecutive pairs among the first ``n_video`` frames; image frames never enter."""
    terms = [
        temporal_loss(_frames(taps_c, k), _frames(taps_c, k + 1), _frames(taps_cs, k), _frames(taps_cs, k + 1))
        for k in range(n_video - 1)
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


@dataclass(frozen=True)
class StepResult:
    total: float
    content: float
    style: float
    identity: float
    temporal: float


def _first_nonfinite(named) -> str | None:
    for name, t in named:
        if t.grad is not None and not np.isfinite(t.grad).all():
            return name
    return None


def train_step(state: TrainState, batch: Batch) -> StepResult:
    """One forward/backward/update; mutates ``state`` in place."""
    params = state.trainable()
    for name, t in params:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"step {state.step}: parameter {name} holds non-finite values")
        t.zero_grad()
    try:
        parts = forward_losses(state, batch)
        loss = total_loss(parts, state.cfg.weights)
    except NonFiniteError as e:
        raise NonFiniteError(f"step {state.step}: forward: {e}") from e
    backward(loss)
    bad = _first_nonfinite(params)
    if bad is not None:
        raise NonFiniteError(f"step {state.step}: gradient of {bad} is non-finite")

    lr, mu = state.cfg.lr, state.cfg.momentum
    # early decoder gradients run into the hundreds; uncapped, one step can kill every rectifier in a stage
    norm = float(np.sqrt(sum(float(np.vdot(t.grad, t.grad)) for _, t in params if t.grad is not None)))
    scale = state.cfg.clip_norm / norm if 0 < state.cfg.clip_norm < norm else 1.0
    for name, t in params:
        if t.grad is None:
            continue
        g = t.grad * scale
        v = state.velocity.get(name)
        v = g if v is None else mu * v + g
        state.velocity[name] = v
        if lr:
            t.data -= lr * v
    state.step += 1
    return StepResult(
        loss.item(), parts.content.item(), parts.style.item(), parts.identity.item(), parts.temporal.item()
    )


# ---------------------------------------------------------------------------
# overfit check
# ---------------------------------------------------------------------------


@dataclass
class OverfitReport:
    initial_loss: float
    final_loss: float
    curve: list  # StepResult per step

    @property
    def ratio(self) -> float:
        return self.final_loss / self.initial_loss

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "total", "content", "style", "identity", "temporal"])
        for i, r in enumerate(self.curve):
            w.writerow([i, *(repr(x) for x in (r.total, r.content, r.style, r.identity, r.temporal))])
        return buf.getvalue()


def overfit_check(cfg: TrainConfig, state: TrainState | None = None) -> OverfitReport:
    """Run ``cfg.steps`` steps on the fixed toy batch.

    The reported final loss is a fresh evaluation after the last update.
    """
    state = state or TrainState.init(cfg)
    batch = toy_batch(cfg.seed, cfg.n_video, cfg.n_image)
    curve = []
    for _ in range(cfg.steps):
        r = train_step(state, batch)
        curve.append(r)
        if r.total > DIVERGENCE_FACTOR * curve[0].total:
            raise DivergenceError(f"loss {r.total:.4g} at step {state.step} exceeds {DIVERGENCE_FACTOR}x initial {curve[0].total:.4g}")
    with no_grad():
        final = total_loss(forward_losses(state, batch), cfg.weights).item()
    return OverfitReport(curve[0].total, final, curve)
