"""Finite-difference gradient verification.

The checker promotes inputs to float64 before differencing: central
differences with eps=1e-3 sit below float32 rounding noise for small
derivatives, so running the oracle in float64 is what makes the 1e-3
relative tolerance meaningful. The function under test must be
deterministic (re-seed any RngStream it uses on every call).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tape, Tensor, backward


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Max over input coordinates of the relative analytic/numeric gradient gap.

    relative gap = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    xs = [Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64) for t in inputs]

    with Tape():
        loss = fn(xs)
        if loss.data.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        backward(loss)
    analytic = [x.grad.copy() for x in xs]

    worst = 0.0
    for k, x in enumerate(xs):
        flat = x.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(fn(xs).data)
            flat[i] = keep - eps
            lo = float(fn(xs).data)
            flat[i] = keep
            num[i] = (hi - lo) / (2.0 * eps)
        ana = analytic[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        gap = np.abs(ana - num) / denom
        if gap.size:
            worst = max(worst, float(gap.max()))
    return worst
