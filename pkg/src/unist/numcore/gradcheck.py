"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, DeterminismError
from .rng import Rng
from .tensor import Tensor, backward, no_grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    samples_per_tensor: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` takes no arguments and must read the current values of ``params``
    (they are perturbed in place). Up to ``samples_per_tensor`` coordinates
    are checked per tensor, all of them for smaller tensors. Relative error
    uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if samples_per_tensor < 1:
        raise ContractError("samples_per_tensor must be >= 1")
    for p in params:
        if not p.requires_grad:
            raise ContractError(f"parameter {p} does not require grad")
        p.zero_grad()

    loss = f()
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    with no_grad():
        f0, f1 = f().item(), f().item()
    if f0 != f1 or f0 != loss.item():
        raise DeterminismError(f"f is not deterministic: {loss.item()!r}, {f0!r}, {f1!r}")

    rng = Rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)  # view: edits land in p.data
        n = flat.size
        coords = range(n) if n <= samples_per_tensor else np.sort(rng.choice(n, samples_per_tensor))
        for i in coords:
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            with no_grad():
                flat[i] = hi
                fp = f().item()
                flat[i] = lo
                fm = f().item()
            flat[i] = orig
            # divide by the representable step, not 2*eps
            numeric = (fp - fm) / (hi - lo)
            a = grad.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
