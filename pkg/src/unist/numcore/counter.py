"""
Runtime FLOP instrumentation.

Counted primitives report themselves here while a ``FlopCounter`` is active.
Labels come from the innermost ``label`` scope, so attention code can tag its
score/weighted-sum products without the counter knowing anything about
attention.

FLOP conventions (shared with the analytic model in ``unist.bench``):

* matmul / conv2d: 1 multiply-add = 2 FLOPs; bias adds not counted
* softmax: 5 FLOPs per element (max, sub, exp, sum, div)
* layer_norm: 7 FLOPs per element
* gelu: 8 FLOPs per element
* elementwise arithmetic, reshapes and residual adds: not counted
"""

from __future__ import annotations

from dataclasses import dataclass

SOFTMAX_FLOPS_PER_ELEM = 5
LAYER_NORM_FLOPS_PER_ELEM = 7
GELU_FLOPS_PER_ELEM = 8

_COUNTERS: list = []
_LABELS: list = []


@dataclass(frozen=True)
class OpRecord:
    kind: str
    label: str
    flops: int
    out_elems: int


class FlopCounter:
    """Context manager collecting an ``OpRecord`` for every counted primitive."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self):
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _COUNTERS.remove(self)
        return False

    @property
    def total(self) -> int:
        return sum(r.flops for r in self.records)

    def by_label(self) -> dict:
        out: dict = {}
        for r in self.records:
            out[r.label] = out.get(r.label, 0) + r.flops
        return out

    def flops_for(self, *labels: str) -> int:
        return sum(r.flops for r in self.records if r.label in labels)


class label:
    """Scope naming the FLOPs recorded inside it."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        _LABELS.append(self.name)

    def __exit__(self, *exc):
        _LABELS.pop()
        return False


def active() -> bool:
    return bool(_COUNTERS)


def current_label(default: str) -> str:
    return _LABELS[-1] if _LABELS else default


def record(kind: str, flops: int, out_elems: int) -> None:
    if not _COUNTERS:
        return
    rec = OpRecord(kind, current_label(kind), int(flops), int(out_elems))
    for c in _COUNTERS:
        c.records.append(rec)
