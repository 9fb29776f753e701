"""
Analytic cost model for attention and full DIT forwards.

A forward pass is described as a list of ``OpNode`` records in execution
order. FLOPs follow the counting conventions in ``unist.numcore.counter`` so
they can be compared, label by label, with what the instrumented runtime
records. Activation memory is tracked in elements: a node's output is live
from the step that produces it until its last consumer has run, and graph
outputs stay live to the end.

Report schema (JSON / CSV columns)::

    H, W, T, D, heads, model          config echo
    flops                             total FLOPs (int)
    score_flops                       attention score + weighted-sum FLOPs (int)
    peak_activation_elems             max live elements over the schedule
    peak_mib_f32                      the same at 4 bytes/element, for reading
                                      against published MiB figures
    largest_attention_map_elems       biggest softmax output
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .attention import AmsaVariant
from .dit import DitConfig
from .errors import AccountingError, ConfigError
from .numcore.counter import GELU_FLOPS_PER_ELEM, LAYER_NORM_FLOPS_PER_ELEM, SOFTMAX_FLOPS_PER_ELEM

SCORE_LABELS = ("attn.score", "attn.weighted_sum")

# published figures at H = W = 32, shown next to ours but never asserted
PUBLISHED_COSTS = {
    "msa": {"gflops": 4.29, "memory_mib": 1.8e4},
    "amsa": {"gflops": 0.27, "memory_mib": 1.1e4},
}
FLOP_CONVENTION = (
    "1 multiply-add = 2 FLOPs; softmax 5/elem; layer_norm 7/elem; gelu 8/elem; "
    "bias and residual adds not counted"
)


@dataclass(frozen=True)
class OpNode:
    name: str
    kind: str
    label: str
    dims: tuple
    out_elems: int
    inputs: tuple = ()


def node_flops(node: OpNode) -> int:
    k, d = node.kind, node.dims
    if k == "matmul":  # (batch, M, K, N)
        b, m, kk, n = d
        return 2 * b * m * kk * n
    if k == "conv2d":  # (B, C_in, C_out, H_out, W_out, kh, kw)
        b, c, o, ho, wo, kh, kw = d
        return 2 * b * o * ho * wo * c * kh * kw
    if k == "softmax":
        return SOFTMAX_FLOPS_PER_ELEM * node.out_elems
    if k == "layer_norm":
        return LAYER_NORM_FLOPS_PER_ELEM * node.out_elems
    if k == "gelu":
        return GELU_FLOPS_PER_ELEM * node.out_elems
    if k in ("input", "add", "concat"):
        return 0
    raise AccountingError(f"no cost rule for primitive kind {k!r} (node {node.name})")


@dataclass(frozen=True)
class LineItem:
    name: str
    kind: str
    label: str
    flops: int
    out_elems: int
    peak_activation_elems: int  # live elements while this op runs


@dataclass
class CostReport:
    model: str
    config: dict
    items: list
    annotations: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return sum(i.flops for i in self.items)

    @property
    def peak_activation_elems(self) -> int:
        return max((i.peak_activation_elems for i in self.items), default=0)

    @property
    def largest_attention_map_elems(self) -> int:
        return max((i.out_elems for i in self.items if i.kind == "softmax"), default=0)

    def flops_for(self, *labels: str) -> int:
        return sum(i.flops for i in self.items if i.label in labels)

    @property
    def score_flops(self) -> int:
        return self.flops_for(*SCORE_LABELS)

    def by_label(self) -> dict:
        out: dict = {}
        for i in self.items:
            if i.flops:
                out[i.label] = out.get(i.label, 0) + i.flops
        return out

    def summary(self) -> dict:
        peak = self.peak_activation_elems
        return {
            "model": self.model,
            **self.config,
            "flops": self.flops,
            "score_flops": self.score_flops,
            "peak_activation_elems": peak,
            "peak_mib_f32": round(peak * 4 / 2**20, 3),
            "largest_attention_map_elems": self.largest_attention_map_elems,
        }

    def to_json(self) -> dict:
        return {
            **self.summary(),
            "flop_convention": FLOP_CONVENTION,
            "by_label": dict(sorted(self.by_label().items())),
            "items": [vars(i) for i in self.items],
            "annotations": self.annotations,
        }


class Graph:
    """Collects ``OpNode`` records in execution order."""

    def __init__(self):
        self.nodes: list[OpNode] = []
        self.outputs: set = set()

    def add(self, kind: str, label: str, dims: tuple, out_elems: int, inputs=()) -> str:
        name = f"{len(self.nodes)}:{label}:{kind}"
        self.nodes.append(OpNode(name, kind, label, tuple(int(x) for x in dims), int(out_elems), tuple(inputs)))
        return name


def count_forward(graph: Graph, model: str = "", config: dict | None = None) -> CostReport:
    """Cost every node and run the liveness schedule."""
    nodes = graph.nodes
    index = {n.name: i for i, n in enumerate(nodes)}
    last_use = {n.name: i for i, n in enumerate(nodes)}
    for i, n in enumerate(nodes):
        for src in n.inputs:
            if src not in index:
                raise AccountingError(f"node {n.name} reads unknown input {src}")
            last_use[src] = max(last_use[src], i)
    end = len(nodes)
    for name in graph.outputs:
        last_use[name] = end

    # sweep: add outputs as they are produced, drop them after their last reader
    frees: dict = {}
    for name, i in last_use.items():
        frees.setdefault(i, []).append(name)
    elems = {n.name: n.out_elems for n in nodes}
    live = 0
    items = []
    for i, n in enumerate(nodes):
        live += n.out_elems
        items.append(LineItem(n.name, n.kind, n.label, node_flops(n), n.out_elems, live))
        for name in frees.get(i, ()):
            live -= elems[name]
    return CostReport(model, dict(config or {}), items)


# ---------------------------------------------------------------------------
# graph builders mirroring the runtime code paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Seqs:
    """A batch of token sequences: ``count`` sequences of ``length`` tokens."""

    count: int
    length: int
    node: str

    @property
    def tokens(self) -> int:
        return self.count * self.length


def msa_nodes(g: Graph, q: Seqs, k: Seqs, v: Seqs, dim: int, heads: int) -> str:
    """Same primitive sequence, shapes and labels as ``attention.msa``."""
    if k.length != v.length:
        raise ConfigError("key and value sequence lengths differ")
    b = max(q.count, k.count, v.count)
    n, m, dh = q.length, k.length, dim // heads
    qp = g.add("matmul", "attn.proj", (1, q.tokens, dim, dim), q.tokens * dim, [q.node])
    kp = g.add("matmul", "attn.proj", (1, k.tokens, dim, dim), k.tokens * dim, [k.node])
    vp = g.add("matmul", "attn.proj", (1, v.tokens, dim, dim), v.tokens * dim, [v.node])
    s = g.add("matmul", "attn.score", (b * heads, n, dh, m), b * heads * n * m, [qp, kp])
    a = g.add("softmax", "attn.softmax", (), b * heads * n * m, [s])
    ctx = g.add("matmul", "attn.weighted_sum", (b * heads, n, m, dh), b * n * dim, [a, vp])
    return g.add("matmul", "attn.proj", (1, b * n, dim, dim), b * n * dim, [ctx])


def amsa_nodes(
    g: Graph, q: str, k: str, v: str, t_q: int, t_kv: int, h: int, w: int, dim: int, heads: int,
    variant: AmsaVariant = AmsaVariant.STANDARD,
) -> str:
    """Mirror of ``attention.amsa`` on (T, H, W, D) grids; ``t_kv`` is 1 or ``t_q``."""
    # stage 1: one sequence per (frame, column)
    f = msa_nodes(g, Seqs(t_q * w, h, q), Seqs(t_kv * w, h, k), Seqs(t_kv * w, h, v), dim, heads)
    f = g.add("layer_norm", "layer_norm", (), t_q * h * w * dim, [f])
    # stage 2: one sequence per (frame, row)
    fq = Seqs(t_q * h, w, f)
    key = Seqs(t_kv * h, w, k)
    if variant is AmsaVariant.STANDARD:
        out = msa_nodes(g, fq, key, fq, dim, heads)
    elif variant is AmsaVariant.VARIANT_A:
        out = msa_nodes(g, fq, fq, fq, dim, heads)
    else:
        out = msa_nodes(g, fq, key, Seqs(t_kv * h, w, v), dim, heads)
    return g.add("layer_norm", "layer_norm", (), t_q * h * w * dim, [out])


def _pointwise(g: Graph, x: str, tokens: int, dim: int) -> str:
    return g.add("matmul", "conv1x1", (1, tokens, dim, dim), tokens * dim, [x])


def _ffn(g: Graph, x: str, tokens: int, dim: int) -> str:
    hidden = g.add("matmul", "ffn", (1, tokens, dim, 4 * dim), tokens * 4 * dim, [x])
    act = g.add("gelu", "ffn", (), tokens * 4 * dim, [hidden])
    return g.add("matmul", "ffn", (1, tokens, 4 * dim, dim), tokens * dim, [act])


def _residual_norm(g: Graph, x: str, skip: str, elems: int) -> str:
    s = g.add("add", "residual", (), elems, [x, skip])
    return g.add("layer_norm", "layer_norm", (), elems, [s])


def _attend(g, q, kv, t_q, t_kv, h, w, cfg: DitConfig) -> str:
    d = cfg.embed_dim
    cq = _pointwise(g, q, t_q * h * w, d)
    ck = _pointwise(g, kv, t_kv * h * w, d)
    cv = _pointwise(g, kv, t_kv * h * w, d)
    return amsa_nodes(g, cq, ck, cv, t_q, t_kv, h, w, d, cfg.heads, cfg.variant)


def encoder_nodes(g: Graph, q: str, kv: str, t_q: int, t_kv: int, h: int, w: int, cfg: DitConfig) -> str:
    n = t_q * h * w * cfg.embed_dim
    s = _residual_norm(g, _attend(g, q, kv, t_q, t_kv, h, w, cfg), q, n)
    return _residual_norm(g, _ffn(g, s, t_q * h * w, cfg.embed_dim), s, n)


def decoder_nodes(g: Graph, c: str, s: str, t: int, t_s: int, h: int, w: int, cfg: DitConfig) -> str:
    n = t * h * w * cfg.embed_dim
    s2 = _residual_norm(g, _attend(g, c, s, t, t_s, h, w, cfg), c, n)
    s1 = _residual_norm(g, _attend(g, s2, s, t, t_s, h, w, cfg), s2, n)
    return _residual_norm(g, _ffn(g, s1, t * h * w, cfg.embed_dim), s1, n)


def interaction_nodes(g: Graph, x: str, t: int, h: int, w: int, cfg: DitConfig) -> str:
    if not cfg.interaction_enabled:
        return x
    if cfg.unimodal:
        return encoder_nodes(g, x, x, t, t, h, w, cfg)
    if t % 2:
        raise ConfigError(f"bimodal interaction needs an even frame count, got {t}")
    half = t // 2
    # the halves are views of x; both blocks read it
    a = encoder_nodes(g, x, x, half, half, h, w, cfg)
    b = encoder_nodes(g, x, x, half, half, h, w, cfg)
    return g.add("concat", "concat", (), t * h * w * cfg.embed_dim, [a, b])


def dit_graph(cfg: DitConfig, t: int, h: int, w: int, t_style: int = 1) -> Graph:
    g = Graph()
    d = cfg.embed_dim
    c = g.add("input", "input", (), t * h * w * d)
    s = g.add("input", "input", (), t_style * h * w * d)
    for _ in range(cfg.n_c):
        c = encoder_nodes(g, c, c, t, t, h, w, cfg)
    for _ in range(cfg.n_s):
        s = encoder_nodes(g, s, s, t_style, t_style, h, w, cfg)
    c = interaction_nodes(g, c, t, h, w, cfg)
    for _ in range(cfg.n_t):
        c = decoder_nodes(g, c, s, t, t_style, h, w, cfg)
    g.outputs.add(c)
    return g


def msa_graph(h: int, w: int, dim: int, heads: int, t: int = 1) -> Graph:
    """Full self-attention over all H*W tokens of each frame."""
    g = Graph()
    x = g.add("input", "input", (), t * h * w * dim)
    seq = Seqs(t, h * w, x)
    g.outputs.add(msa_nodes(g, seq, seq, seq, dim, heads))
    return g


def amsa_graph(h: int, w: int, dim: int, heads: int, t: int = 1, variant: AmsaVariant = AmsaVariant.STANDARD) -> Graph:
    g = Graph()
    x = g.add("input", "input", (), t * h * w * dim)
    g.outputs.add(amsa_nodes(g, x, x, x, t, t, h, w, dim, heads, variant))
    return g


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def attention_reports(h: int, w: int, dim: int = 512, heads: int = 8, t: int = 1) -> tuple[CostReport, CostReport]:
    cfg = {"H": h, "W": w, "T": t, "D": dim, "heads": heads}
    msa_r = count_forward(msa_graph(h, w, dim, heads, t), "msa", cfg)
    amsa_r = count_forward(amsa_graph(h, w, dim, heads, t), "amsa", cfg)
    if (h, w) == (32, 32):
        msa_r.annotations["published"] = PUBLISHED_COSTS["msa"]
        amsa_r.annotations["published"] = PUBLISHED_COSTS["amsa"]
    return msa_r, amsa_r


def dit_report(cfg: DitConfig, t: int, h: int, w: int, t_style: int = 1) -> CostReport:
    conf = {"H": h, "W": w, "T": t, "D": cfg.embed_dim, "heads": cfg.heads}
    return count_forward(dit_graph(cfg, t, h, w, t_style), "dit", conf)


@dataclass
class SweepRow:
    msa: CostReport
    amsa: CostReport

    @property
    def ratio(self) -> float:
        return self.msa.score_flops / self.amsa.score_flops

    def as_dict(self) -> dict:
        c = self.msa.config
        row = {
            "H": c["H"], "W": c["W"], "T": c["T"], "D": c["D"], "heads": c["heads"],
            "msa_score_flops": self.msa.score_flops,
            "amsa_score_flops": self.amsa.score_flops,
            "score_ratio": self.ratio,
            "msa_flops": self.msa.flops,
            "amsa_flops": self.amsa.flops,
            "msa_peak_elems": self.msa.peak_activation_elems,
            "amsa_peak_elems": self.amsa.peak_activation_elems,
            "msa_peak_mib_f32": round(self.msa.peak_activation_elems * 4 / 2**20, 3),
            "amsa_peak_mib_f32": round(self.amsa.peak_activation_elems * 4 / 2**20, 3),
            "msa_largest_map": self.msa.largest_attention_map_elems,
            "amsa_largest_map": self.amsa.largest_attention_map_elems,
        }
        published = self.msa.annotations.get("published")
        row["published_note"] = (
            f"paper: {PUBLISHED_COSTS['msa']['gflops']}G / {PUBLISHED_COSTS['amsa']['gflops']}G" if published else ""
        )
        return row


def sweep(sizes, dim: int = 512, heads: int = 8, t: int = 1) -> list[SweepRow]:
    """One MSA/AMSA report pair per square grid size."""
    sizes = list(sizes)
    if not sizes:
        raise ConfigError("sweep needs at least one grid size")
    return [SweepRow(*attention_reports(s, s, dim, heads, t)) for s in sizes]


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    dicts = [r.as_dict() for r in rows]
    writer = csv.DictWriter(buf, fieldnames=list(dicts[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(dicts)
    return buf.getvalue()


def sweep_json(rows: list[SweepRow]) -> str:
    doc = {
        "schema": 1,
        "flop_convention": FLOP_CONVENTION,
        "rows": [r.as_dict() for r in rows],
        "reports": [{"msa": r.msa.to_json(), "amsa": r.amsa.to_json()} for r in rows],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
