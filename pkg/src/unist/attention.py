"""
Multi-head attention and its axial factorization.

Tokens live on a (T, H, W, D) grid. ``amsa`` runs one attention pass down
each column (over H) and a second along each row (over W), so the attention
maps are H x H and W x W instead of (HW) x (HW). In the standard wiring the
second pass takes the first pass's normalized output as query *and* value but
keeps the original key.

Weights act on row vectors: projected queries are ``q @ wq``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numcore import Rng, Tensor, counter, init_uniform, label, layer_norm
from .numcore.ops import softmax_rows
from .numcore.tensor import make_node, unbroadcast
from .numcore.counter import SOFTMAX_FLOPS_PER_ELEM


class AmsaVariant(enum.Enum):
    STANDARD = "standard"  # stage 2: Q = f, K = k, V = f
    VARIANT_A = "a"  # stage 2: Q = K = V = f
    VARIANT_B = "b"  # stage 2: Q = f, K = k, V = v

    @classmethod
    def parse(cls, name: str) -> "AmsaVariant":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown AMSA variant {name!r}; expected standard, a or b") from None


@dataclass
class AttnParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (d, d):
                raise ShapeError(f"attention weights must all be ({d}, {d}), got {w.shape}")
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"embedding dim {d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: Rng, dim: int, heads: int) -> "AttnParams":
        return cls(*(init_uniform(rng, (dim, dim), dim) for _ in range(4)), heads=heads)


@dataclass
class AmsaParams:
    """Two attention layers plus the layer norm that follows each."""

    p1: AttnParams
    p2: AttnParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @classmethod
    def init(cls, rng: Rng, dim: int, heads: int) -> "AmsaParams":
        def ones():
            return Tensor(np.ones(dim), requires_grad=True)

        def zeros():
            return Tensor(np.zeros(dim), requires_grad=True)

        return cls(AttnParams.init(rng, dim, heads), AttnParams.init(rng, dim, heads), ones(), zeros(), ones(), zeros())


def _split(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-3, -2)  # (..., heads, n, dh)


def _merge(x: np.ndarray) -> np.ndarray:
    x = x.swapaxes(-3, -2)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _proj(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # one 2-D BLAS call beats numpy's batched matmul over leading dims
    return (_rows(x) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def msa(q: Tensor, k: Tensor, v: Tensor, p: AttnParams) -> Tensor:
    """Scaled dot-product multi-head attention as a single tape node.

    ``q`` is (..., N, D); ``k`` and ``v`` are (..., M, D). Leading batch dims
    broadcast, so one key/value set can serve many query batches.
    """
    d = p.dim
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"msa: feature dims q={q.shape}, k={k.shape}, v={v.shape} vs params D={d}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"msa: key/value lengths differ: {k.shape} vs {v.shape}")
    h = p.heads
    scale = 1.0 / math.sqrt(d // h)
    wq, wk, wv, wo = p.wq.data, p.wk.data, p.wv.data, p.wo.data
    qd, kd, vd = q.data, k.data, v.data

    qh = _split(_proj(qd, wq) * scale, h)  # scaling q is cheaper than scaling the score map
    kh = _split(_proj(kd, wk), h)
    vh = _split(_proj(vd, wv), h)
    a = softmax_rows(qh @ kh.swapaxes(-1, -2), inplace=True)
    ctx = _merge(a @ vh)
    out = _proj(ctx, wo)

    if counter.active():
        n_in = qd.size + kd.size + vd.size  # projected elements; k and v token counts may differ
        n_attn = a.size // h  # query-key pairs, broadcast batch included
        with label("attn.proj"):
            counter.record("matmul", 2 * d * n_in, n_in)
        with label("attn.score"):
            counter.record("matmul", 2 * n_attn * d, a.size)
        with label("attn.softmax"):
            counter.record("softmax", SOFTMAX_FLOPS_PER_ELEM * a.size, a.size)
        with label("attn.weighted_sum"):
            counter.record("matmul", 2 * n_attn * d, ctx.size)
        with label("attn.proj"):
            counter.record("matmul", 2 * ctx.size * d, out.size)

    def bw(g):
        gw_o = _rows(ctx).T @ _rows(g)
        gctx = _split(_proj(g, wo.T), h)
        ga = gctx @ vh.swapaxes(-1, -2)
        gvh = unbroadcast(a.swapaxes(-1, -2) @ gctx, vh.shape)
        gs = a * (ga - ((ga * a) @ np.ones(a.shape[-1]))[..., None])
        gqh = unbroadcast(gs @ kh, qh.shape)  # w.r.t. the scaled queries
        gkh = unbroadcast(gs.swapaxes(-1, -2) @ qh, kh.shape)
        gq_p, gk_p, gv_p = _merge(gqh) * scale, _merge(gkh), _merge(gvh)
        return (
            _proj(gq_p, wq.T),
            _proj(gk_p, wk.T),
            _proj(gv_p, wv.T),
            _rows(qd).T @ _rows(gq_p),
            _rows(kd).T @ _rows(gk_p),
            _rows(vd).T @ _rows(gv_p),
            gw_o,
        )

    return make_node(out, (q, k, v, p.wq, p.wk, p.wv, p.wo), bw, "msa")


def _check_grids(q: Tensor, k: Tensor, v: Tensor):
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError(f"amsa: expected (T, H, W, D) grids, got {q.shape}, {k.shape}, {v.shape}")
    if k.shape != v.shape:
        raise ShapeError(f"amsa: key and value grids differ: {k.shape} vs {v.shape}")
    if q.shape[1:] != k.shape[1:]:
        raise ShapeError(f"amsa: spatial/feature dims of q {q.shape} and k/v {k.shape} disagree")
    if k.shape[0] not in (1, q.shape[0]):
        raise ShapeError(f"amsa: key frames must be 1 or {q.shape[0]}, got {k.shape[0]}")


def _columns(x: Tensor) -> Tensor:
    return x.transpose(0, 2, 1, 3)  # (T, W, H, D): each column is a length-H sequence


def axial_stage1(q: Tensor, k: Tensor, v: Tensor, params: AmsaParams) -> Tensor:
    """Height-axis attention for every (frame, column), then layer norm."""
    f = msa(_columns(q), _columns(k), _columns(v), params.p1)
    with label("layer_norm"):
        f = layer_norm(f, params.ln1_gamma, params.ln1_beta)
    return _columns(f)


def amsa(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: AmsaParams,
    variant: AmsaVariant = AmsaVariant.STANDARD,
) -> Tensor:
    """Axial multi-head attention over (T, H, W, D) grids.

    ``k``/``v`` may carry a single frame, which is then shared by every query frame.
    """
    _check_grids(q, k, v)
    f = axial_stage1(q, k, v, params)
    # rows are already contiguous along W in (T, H, W, D)
    if variant is AmsaVariant.STANDARD:
        out = msa(f, k, f, params.p2)
    elif variant is AmsaVariant.VARIANT_A:
        out = msa(f, f, f, params.p2)
    else:
        out = msa(f, k, v, params.p2)
    with label("layer_norm"):
        return layer_norm(out, params.ln2_gamma, params.ln2_beta)


# ---------------------------------------------------------------------------
# nested-loop reference
# ---------------------------------------------------------------------------


def _loop_msa(q, k, v, wq, wk, wv, wo, heads):
    n, d = q.shape
    m = k.shape[0]
    dh = d // heads
    qp, kp, vp = q @ wq, k @ wk, v @ wv
    out = np.zeros((n, d))
    for hd in range(heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        for i in range(n):
            s = np.array([np.dot(qp[i, cols], kp[j, cols]) / math.sqrt(dh) for j in range(m)])
            w = np.exp(s - s.max())
            w /= w.sum()
            acc = np.zeros(dh)
            for j in range(m):
                acc += w[j] * vp[j, cols]
            out[i, cols] = acc
    return out @ wo


def _loop_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * gamma + beta


def axial_oracle(q, k, v, params: AmsaParams, variant: AmsaVariant = AmsaVariant.STANDARD, stage1_only: bool = False):
    """Same contract as ``amsa`` but computed with explicit per-column/per-row loops on plain arrays."""
    q, k, v = (np.asarray(t.data if isinstance(t, Tensor) else t) for t in (q, k, v))
    T, H, W, D = q.shape
    if H > 8 or W > 8:
        raise ShapeError("axial_oracle is for small grids only (H, W <= 8)")
    p1, p2 = params.p1, params.p2
    w1 = [p1.wq.data, p1.wk.data, p1.wv.data, p1.wo.data]
    w2 = [p2.wq.data, p2.wk.data, p2.wv.data, p2.wo.data]
    f = np.zeros((T, H, W, D))
    for t in range(T):
        ts = t if k.shape[0] > 1 else 0
        for w in range(W):
            col = _loop_msa(q[t, :, w, :], k[ts, :, w, :], v[ts, :, w, :], *w1, p1.heads)
            for h in range(H):
                f[t, h, w] = _loop_layer_norm(col[h], params.ln1_gamma.data, params.ln1_beta.data)
    if stage1_only:
        return f
    out = np.zeros((T, H, W, D))
    for t in range(T):
        ts = t if k.shape[0] > 1 else 0
        for h in range(H):
            fr = f[t, h, :, :]
            if variant is AmsaVariant.STANDARD:
                kr, vr = k[ts, h, :, :], fr
            elif variant is AmsaVariant.VARIANT_A:
                kr, vr = fr, fr
            else:
                kr, vr = k[ts, h, :, :], v[ts, h, :, :]
            row = _loop_msa(fr, kr, vr, *w2, p2.heads)
            for w in range(W):
                out[t, h, w] = _loop_layer_norm(row[w], params.ln2_gamma.data, params.ln2_beta.data)
    return out


# ---------------------------------------------------------------------------
# analytic cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionFlops:
    score: int
    weighted_sum: int
    softmax: int
    projection: int

    @property
    def score_terms(self) -> int:
        return self.score + self.weighted_sum

    @property
    def total(self) -> int:
        return self.score + self.weighted_sum + self.softmax + self.projection


def attention_flops(n_q: int, n_kv: int, dim: int, heads: int, batch: int = 1) -> AttentionFlops:
    """FLOPs of one ``msa`` call, 1 multiply-add = 2 FLOPs.

    Projections are reported on their own line: q and output over ``n_q``
    tokens, k and v over ``n_kv``.
    """
    if min(n_q, n_kv, dim, heads, batch) < 1:
        raise ValueError("attention_flops: all arguments must be >= 1")
    return AttentionFlops(
        score=batch * 2 * n_q * n_kv * dim,
        weighted_sum=batch * 2 * n_q * n_kv * dim,
        softmax=batch * SOFTMAX_FLOPS_PER_ELEM * heads * n_q * n_kv,
        projection=batch * 2 * dim * dim * (2 * n_q + 2 * n_kv),
    )
