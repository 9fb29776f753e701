"""
Training losses over encoder feature taps, and evaluation metrics.

Losses return scalar Tensors so they can be differentiated; metrics return
plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .codec import FeatureTaps
from .errors import ConfigError, ShapeError
from .numcore import Tensor, absolute, as_tensor, clamp_min, instance_stats, l2_norm, matmul

COSINE_EPS = 1e-8
TEMPORAL_TAPS = (2, 3)  # zero-based: third and fourth taps
BLUR_SIZE = 21
BLUR_SIGMA = 3.0


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.1
    lambda_s: float = 1.5
    lambda_t: float = 90.0
    lambda_id1: float = 0.1
    lambda_id2: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class LossParts:
    content: Tensor
    style: Tensor
    identity: Tensor
    temporal: Tensor


def _pairs(a: FeatureTaps, b: FeatureTaps, same_shape: bool = True):
    for i, (x, y) in enumerate(zip(a.as_list(), b.as_list())):
        if same_shape and x.shape != y.shape:
            raise ShapeError(f"tap {i + 1}: shapes differ, {x.shape} vs {y.shape}")
        if not same_shape and x.shape[1] != y.shape[1]:
            raise ShapeError(f"tap {i + 1}: channel counts differ, {x.shape[1]} vs {y.shape[1]}")
        yield x, y


def _sum(terms) -> Tensor:
    total = None
    for t in terms:
        total = t if total is None else total + t
    return total


def content_loss(taps_cs: FeatureTaps, taps_c: FeatureTaps) -> Tensor:
    """Sum over taps of the Euclidean distance between whole tap tensors."""
    return _sum(l2_norm(x - y) for x, y in _pairs(taps_cs, taps_c))


def style_loss(taps_cs: FeatureTaps, taps_s: FeatureTaps) -> Tensor:
    """Instance mean/std mismatch per tap: channel-axis L2 per item, summed over the batch.

    A single-item style batch is compared against every item of ``taps_cs``.
    """
    terms = []
    for x, y in _pairs(taps_cs, taps_s, same_shape=False):
        if y.shape[0] not in (1, x.shape[0]):
            raise ShapeError(f"style batch {y.shape[0]} vs stylized batch {x.shape[0]}")
        mu_x, sd_x = instance_stats(x)
        mu_y, sd_y = instance_stats(y)
        terms.append(l2_norm(mu_x - mu_y, axis=1).sum() + l2_norm(sd_x - sd_y, axis=1).sum())
    return _sum(terms)


def identity_loss(
    cc: Tensor,
    c: Tensor,
    ss: Tensor,
    s: Tensor,
    taps_cc: FeatureTaps,
    taps_c: FeatureTaps,
    taps_ss: FeatureTaps,
    taps_s: FeatureTaps,
    w: LossWeights = LossWeights(),
) -> Tensor:
    for a, b in ((cc, c), (ss, s)):
        if a.shape != b.shape:
            raise ShapeError(f"identity pair shapes differ: {a.shape} vs {b.shape}")
    pixel = l2_norm(cc - c) + l2_norm(ss - s)
    feats = content_loss(taps_cc, taps_c) + content_loss(taps_ss, taps_s)
    return w.lambda_id1 * pixel + w.lambda_id2 * feats


def _tokens(f: Tensor) -> Tensor:
    b, ch, h, w = f.shape
    return f.reshape(b, ch, h * w).transpose(0, 2, 1)  # (B, N, C)


def cosine_distance_matrix(fu: Tensor, fv: Tensor) -> Tensor:
    """1 - cos between every position of ``fu`` (rows) and of ``fv`` (columns), per batch item."""
    u, v = _tokens(fu), _tokens(fv)
    nu, nv = l2_norm(u, axis=2), l2_norm(v, axis=2)
    b, n_u, n_v = nu.shape[0], nu.shape[1], nv.shape[1]
    denom = clamp_min(nu.reshape(b, n_u, 1) * nv.reshape(b, 1, n_v), COSINE_EPS)
    return 1.0 - matmul(u, v.transpose(0, 2, 1)) / denom


def _column_normalized(d: Tensor) -> Tensor:
    col = clamp_min(d.sum(axis=1, keepdims=True), COSINE_EPS)
    return d / col


def temporal_loss(taps_c1: FeatureTaps, taps_c2: FeatureTaps, taps_cs1: FeatureTaps, taps_cs2: FeatureTaps) -> Tensor:
    """Mismatch of column-normalized cosine-distance structure between two frames, before and after stylization."""
    orig1, orig2, sty1, sty2 = (t.as_list() for t in (taps_c1, taps_c2, taps_cs1, taps_cs2))
    terms = []
    for i in TEMPORAL_TAPS:
        if orig1[i].shape != sty1[i].shape or orig2[i].shape != sty2[i].shape:
            raise ShapeError(f"tap {i + 1}: original and stylized frame shapes differ")
        d_c = _column_normalized(cosine_distance_matrix(orig1[i], orig2[i]))
        d_cs = _column_normalized(cosine_distance_matrix(sty1[i], sty2[i]))
        terms.append(absolute(d_c - d_cs).mean())
    return _sum(terms)


def total_loss(parts: LossParts, w: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum; the identity term carries its weights internally."""
    c, s, i, t = (as_tensor(p) for p in (parts.content, parts.style, parts.identity, parts.temporal))
    return w.lambda_c * c + w.lambda_s * s + i + w.lambda_t * t


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _item(taps: FeatureTaps, b: int) -> FeatureTaps:
    return FeatureTaps(*(t[b : b + 1] for t in taps.as_list()))


def metric_dc(taps_cs: FeatureTaps, taps_c: FeatureTaps) -> float:
    """Content loss per batch item, averaged."""
    n = taps_cs.phi1.shape[0]
    return float(np.mean([content_loss(_item(taps_cs, b), _item(taps_c, b)).item() for b in range(n)]))


def metric_ds(taps_cs: FeatureTaps, taps_s: FeatureTaps) -> float:
    """Style loss averaged over the batch."""
    return style_loss(taps_cs, taps_s).item() / taps_cs.phi1.shape[0]


def gram(f: np.ndarray) -> np.ndarray:
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    return flat @ flat.transpose(0, 2, 1) / (c * h * w)


def gram_texture_diff(taps_cs: FeatureTaps, taps_s: FeatureTaps) -> float:
    total = 0.0
    for x, y in _pairs(taps_cs, taps_s, same_shape=False):
        total += float(np.linalg.norm(gram(x.data) - gram(y.data)))
    return total


def gaussian_kernel(size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r * r) / (2 * sigma * sigma))
    return k / k.sum()


def blur(img: np.ndarray, size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with edge-replicate padding."""
    k = gaussian_kernel(size, sigma)
    r = size // 2
    out = np.asarray(img, dtype=np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(padded, size, axis=axis)
        out = win @ k
    return out


def color_diff(img_cs, img_s) -> float:
    a = np.asarray(img_cs.data if isinstance(img_cs, Tensor) else img_cs, dtype=np.float64)
    b = np.asarray(img_s.data if isinstance(img_s, Tensor) else img_s, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 4:
        raise ShapeError(f"color_diff needs equal (B, 3, H, W) batches, got {a.shape} vs {b.shape}")
    diff = blur(a) - blur(b)
    return float(np.mean(np.sqrt((diff * diff).sum(axis=(1, 2, 3)))))
