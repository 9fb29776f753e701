"""
Self-check suites behind ``unist verify``.

Each suite returns a list of ``Check`` rows (measured value, tolerance,
pass flag). The acceptance tests call the same functions with their full
seed lists; the CLI defaults are lighter so a verify run stays quick.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .attention import AmsaParams, AmsaVariant, AttnParams, amsa, axial_oracle, msa
from .bench import Graph, attention_reports, count_forward, dit_report, encoder_nodes, sweep
from .codec import CodecParams, FeatureTaps, decode
from .dit import (
    DecoderParams,
    DitConfig,
    DitParams,
    EncoderParams,
    GridKind,
    TokenGrid,
    decoder_block,
    dit_forward,
    encoder_block,
    video_image_interaction,
)
from .losses import (
    LossParts,
    LossWeights,
    content_loss,
    identity_loss,
    style_loss,
    temporal_loss,
    total_loss,
)
from .numcore import FlopCounter, Rng, Tensor, grad_check, no_grad
from .params import named_tensors, parameters

ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4
COINCIDENCE_TOL = 1e-12
TOTAL_TOL = 1e-12
# finite-difference step for deep composites; at 1e-6 roundoff in f swamps tiny gradient coordinates
COMPOSITE_EPS = 1e-4


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tol: float
    ok: bool

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.value:.3e} (tol {self.tol:g})"


def _below(name: str, value: float, tol: float) -> Check:
    return Check(name, float(value), tol, bool(value < tol))


def _exact(name: str, got, want) -> Check:
    return Check(name, float(abs(got - want)), 0.0, bool(got == want))


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------


def random_attention_config(rng: Rng):
    t, h, w = (int(x) for x in rng.integers(1, [3, 6, 6]))
    heads = int(rng.integers(1, 2))
    dim = heads * int(rng.integers(1, 16 // heads))
    t_kv = t if rng.uniform(1)[0] < 0.7 else 1
    return t, t_kv, h, w, dim, heads


def oracle_suite(n_configs: int = 20, seed: int = 0) -> list[Check]:
    rng = Rng(seed)
    worst = {v: 0.0 for v in AmsaVariant}
    for _ in range(n_configs):
        t, t_kv, h, w, dim, heads = random_attention_config(rng)
        p = AmsaParams.init(rng, dim, heads)
        q = Tensor(rng.normal((t, h, w, dim)))
        k, v = Tensor(rng.normal((t_kv, h, w, dim))), Tensor(rng.normal((t_kv, h, w, dim)))
        for variant in AmsaVariant:
            with no_grad():
                got = amsa(q, k, v, p, variant).data
            worst[variant] = max(worst[variant], float(np.abs(got - axial_oracle(q, k, v, p, variant)).max()))
    return [_below(f"amsa[{v.value}] vs loop oracle, {n_configs} configs", e, ORACLE_TOL) for v, e in worst.items()]


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _leaf(rng: Rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(shape, low, high), requires_grad=True)


def _projected(f: Callable[[], Tensor], proj: np.ndarray) -> Callable[[], Tensor]:
    # random projection so every output coordinate carries a distinct weight
    return lambda: (f() * proj).sum()


def _gc_msa(seed):
    rng = Rng(seed)
    p = AttnParams.init(rng, 8, 2)
    q, k, v = _leaf(rng, (2, 5, 8)), _leaf(rng, (2, 4, 8)), _leaf(rng, (2, 4, 8))
    f = _projected(lambda: msa(q, k, v, p), rng.normal((2, 5, 8)))
    return grad_check(f, [q, k, v] + parameters(p))


def _gc_amsa(seed):
    rng = Rng(seed)
    p = AmsaParams.init(rng, 8, 2)
    q, k, v = _leaf(rng, (2, 3, 4, 8)), _leaf(rng, (2, 3, 4, 8)), _leaf(rng, (2, 3, 4, 8))
    proj = rng.normal((2, 3, 4, 8))
    return max(
        grad_check(_projected(lambda: amsa(q, k, v, p, variant), proj), [q, k, v] + parameters(p), eps=COMPOSITE_EPS)
        for variant in AmsaVariant
    )


def _norms_random(tree, rng):
    for name, t in named_tensors(tree):
        if name.endswith("gamma"):
            t.data[:] = rng.uniform(t.shape, 0.5, 1.5)
        elif name.endswith("beta"):
            t.data[:] = rng.uniform(t.shape, -0.5, 0.5)


def _gc_encoder(seed):
    rng = Rng(seed)
    p = EncoderParams.init(rng, 16, 2)
    _norms_random(p, rng)
    q, kv = _leaf(rng, (2, 3, 3, 16)), _leaf(rng, (2, 3, 3, 16))
    f = _projected(lambda: encoder_block(q, kv, p), rng.normal((2, 3, 3, 16)))
    return grad_check(f, [q, kv] + parameters(p), eps=COMPOSITE_EPS)


def _gc_decoder(seed):
    rng = Rng(seed)
    p = DecoderParams.init(rng, 16, 2)
    _norms_random(p, rng)
    c, s = _leaf(rng, (2, 3, 3, 16)), _leaf(rng, (1, 3, 3, 16))
    f = _projected(lambda: decoder_block(c, s, p), rng.normal((2, 3, 3, 16)))
    return grad_check(f, [c, s] + parameters(p), eps=COMPOSITE_EPS)


def _gc_dit(seed, grid: int = 4):
    rng = Rng(seed)
    cfg = DitConfig()
    p = DitParams.init(cfg, rng)
    c = TokenGrid(Tensor(rng.normal((2, grid, grid, 16))), GridKind.CONTENT)
    s = TokenGrid(Tensor(rng.normal((1, grid, grid, 16))), GridKind.STYLE)
    f = _projected(lambda: dit_forward(c, s, cfg, p).data, rng.normal((2, grid, grid, 16)))
    return grad_check(f, parameters(p), eps=COMPOSITE_EPS)


def _gc_decode(seed):
    rng = Rng(seed)
    codec = CodecParams.init(rng, 4, 8)
    tok = TokenGrid(_leaf(rng, (1, 2, 2, 8)), GridKind.STYLIZED)
    f = _projected(lambda: decode(tok, codec), rng.normal((1, 3, 16, 16)))
    return grad_check(f, [tok.data] + parameters(codec.decoder))


_TAP_SHAPES = [(2, 4, 8, 8), (2, 8, 4, 4), (2, 16, 3, 3), (2, 16, 2, 2)]


def _taps(rng, shapes=_TAP_SHAPES, low=-1.0):
    return FeatureTaps(*(_leaf(rng, s, low, 1.0) for s in shapes))


def _flat(*tapsets):
    return [x for t in tapsets for x in t.as_list()]


def _gc_losses(seed) -> dict:
    rng = Rng(100 + seed)
    a, b = _taps(rng), _taps(rng)
    out = {
        "content_loss": grad_check(lambda: content_loss(a, b), _flat(a, b)),
        "style_loss": grad_check(lambda: style_loss(a, b), _flat(a, b)),
    }
    pos = [(1,) + s[1:] for s in _TAP_SHAPES]
    c1, c2, s1, s2 = (_taps(rng, pos, low=0.0) for _ in range(4))
    out["temporal_loss"] = grad_check(lambda: temporal_loss(c1, c2, s1, s2), _flat(c1, s1, s2))
    cc, c, ss, s = (_leaf(rng, (1, 3, 8, 8), 0.0) for _ in range(4))
    t = [_taps(rng) for _ in range(4)]
    out["identity_loss"] = grad_check(
        lambda: identity_loss(cc, c, ss, s, *t), [cc, ss] + _flat(t[0], t[2]), eps=COMPOSITE_EPS
    )
    parts = [Tensor(x, requires_grad=True) for x in rng.uniform(4)]
    out["total_loss"] = grad_check(lambda: total_loss(LossParts(*parts)), parts)
    return out


def grads_suite(seeds=(0,), include_dit: bool = True) -> list[Check]:
    worst: dict = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in seeds:
        note("msa", _gc_msa(seed))
        note("amsa (3 variants)", _gc_amsa(seed))
        note("encoder_block", _gc_encoder(seed))
        note("decoder_block", _gc_decoder(seed))
        if include_dit:
            note("dit_forward", _gc_dit(seed))
        note("decode", _gc_decode(seed))
        for name, err in _gc_losses(seed).items():
            note(name, err)
    return [_below(f"grad_check {name}, seeds {list(seeds)}", e, GRAD_TOL) for name, e in worst.items()]


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


def _instrumented_by_label(fn) -> dict:
    with no_grad(), FlopCounter() as fc:
        fn()
    return {k: v for k, v in fc.by_label().items() if v}


def flops_suite(h: int = 32, dim: int = 512, heads: int = 8) -> list[Check]:
    msa_r, amsa_r = attention_reports(h, h, dim, heads)
    rng = Rng(0)
    p = AmsaParams.init(rng, dim, heads)
    x = Tensor(rng.normal((1, h, h, dim)))
    seq = Tensor(x.data.reshape(1, h * h, dim))
    run_msa = _instrumented_by_label(lambda: msa(seq, seq, seq, p.p1))
    run_amsa = _instrumented_by_label(lambda: amsa(x, x, x, p))
    checks = [
        Check("msa counter == analytic (by label)", 0.0, 0.0, run_msa == msa_r.by_label()),
        Check("amsa counter == analytic (by label)", 0.0, 0.0, run_amsa == amsa_r.by_label()),
        _exact(f"score-FLOP ratio msa/amsa at {h}x{h}, D={dim}", msa_r.score_flops / amsa_r.score_flops, h / 2),
    ]
    rows = sweep([8, 16, 32, 64], dim, heads)
    for a, b in zip(rows, rows[1:]):
        size = b.msa.config["H"]
        checks.append(_exact(f"amsa score growth {size // 2}->{size}", b.amsa.score_flops / a.amsa.score_flops, 8.0))
        checks.append(_exact(f"msa score growth {size // 2}->{size}", b.msa.score_flops / a.msa.score_flops, 16.0))
    return checks


# ---------------------------------------------------------------------------
# loss identities
# ---------------------------------------------------------------------------


def losses_suite(seed: int = 0) -> list[Check]:
    rng = Rng(seed)
    a = _taps(rng)
    b = _taps(rng, [(1,) + s[1:] for s in _TAP_SHAPES])
    img = Tensor(rng.uniform((1, 3, 8, 8)))
    zero = [
        content_loss(a, a).item(),
        style_loss(a, a).item(),
        identity_loss(img, img, img, img, a, a, a, a).item(),
        temporal_loss(b, b, b, b).item(),
    ]
    checks = [Check("losses vanish on identical inputs", max(abs(z) for z in zero), 0.0, all(z == 0.0 for z in zero))]

    # per-token positive rescaling: powers of two keep every product exact
    pos = [(1,) + s[1:] for s in _TAP_SHAPES]
    c1, c2 = _taps(rng, pos, 0.0), _taps(rng, pos, 0.0)

    def rescaled(t):
        return FeatureTaps(*(Tensor(x.data * 2.0 ** rng.integers(-3, 3, (1, 1, *x.shape[2:]))) for x in t.as_list()))

    lt = temporal_loss(c1, c2, rescaled(c1), rescaled(c2)).item()
    checks.append(Check("temporal loss under positive per-vector rescaling", abs(lt), 0.0, lt == 0.0))
    ones = LossParts(*(Tensor(1.0) for _ in range(4)))
    total = total_loss(ones, LossWeights()).item()
    checks.append(_below("total_loss(1,1,1,1) - 92.6", abs(total - 92.6), TOTAL_TOL))
    return checks


# ---------------------------------------------------------------------------
# interaction
# ---------------------------------------------------------------------------


def interaction_suite(seeds=(0, 1, 2)) -> list[Check]:
    worst = 0.0
    for seed in seeds:
        rng = Rng(seed)
        cfg = DitConfig()
        params = DitParams.init(cfg, rng)
        shared = [params.interaction[0], params.interaction[0]]
        half = rng.normal((2, 4, 4, cfg.embed_dim))
        seq = Tensor(np.concatenate([half, half]))
        with no_grad():
            cross = video_image_interaction(seq, shared, cfg).data
            self_ = video_image_interaction(seq, shared, replace(cfg, unimodal=True)).data
        worst = max(worst, float(np.abs(cross - self_).max()))
    return [_below("unimodal vs bimodal on identical halves", worst, COINCIDENCE_TOL)]


def ablation_suite(seed: int = 0, t: int = 2, h: int = 4, w: int = 4) -> list[Check]:
    rng = Rng(seed)
    cfg = DitConfig()
    off_cfg = replace(cfg, interaction_enabled=False)
    params = DitParams.init(cfg, rng)
    c = TokenGrid(Tensor(rng.normal((t, h, w, cfg.embed_dim))), GridKind.CONTENT)
    s = TokenGrid(Tensor(rng.normal((1, h, w, cfg.embed_dim))), GridKind.STYLE)
    with no_grad():
        on = dit_forward(c, s, cfg, params).data.data
        off = dit_forward(c, s, off_cfg, params).data.data
    diff = float(np.abs(on - off).max())

    g = Graph()
    x = g.add("input", "input", (), (t // 2) * h * w * cfg.embed_dim)
    encoder_nodes(g, x, x, t // 2, t // 2, h, w, cfg)
    two_blocks = 2 * count_forward(g).flops
    delta = dit_report(cfg, t, h, w).flops - dit_report(off_cfg, t, h, w).flops
    counted = _instrumented_by_label(lambda: dit_forward(c, s, cfg, params))
    counted_off = _instrumented_by_label(lambda: dit_forward(c, s, off_cfg, params))
    return [
        Check("--no-interaction changes the output (max diff)", diff, 0.0, diff > 0.0),
        _exact("analytic FLOP delta - two interaction blocks", delta, two_blocks),
        _exact("counted FLOP delta - two interaction blocks", sum(counted.values()) - sum(counted_off.values()), two_blocks),
    ]


SUITES = {
    "amsa": lambda: oracle_suite(5),
    "grads": lambda: grads_suite((0,), include_dit=False),
    "flops": flops_suite,
    "losses": losses_suite,
    "interaction": lambda: interaction_suite((0,)),
    "ablation": ablation_suite,
}
