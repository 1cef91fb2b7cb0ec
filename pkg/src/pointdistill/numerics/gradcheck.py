"""Central finite-difference verification of recorded gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    samples: int
    raw_max_rel_error: float = 0.0  # same, without the round-off allowance


def _value(out) -> float:
    return float(out.data) if isinstance(out, Tensor) else float(out)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4,
                      samples: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` re-evaluates the scalar loss from the current contents of
    ``params``. When ``samples`` is given, that many coordinates are drawn
    uniformly (without replacement) across all parameters; otherwise every
    coordinate is checked. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``, except that a discrepancy below the
    round-off resolution of the central difference itself,
    ``8 * eps * max(|f(x+h)|, |f(x-h)|) / (2h)``, counts as agreement: such
    gradients are too small for this step to measure.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if samples is None or samples >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=samples, replace=False))

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, len(flat))
    raw_worst = 0.0
    for fi in flat:
        pi = int(np.searchsorted(offsets, fi, side="right") - 1)
        p = params[pi]
        idx = np.unravel_index(int(fi - offsets[pi]), p.shape)
        orig = p.data[idx].copy()
        p.data[idx] = orig + step
        up = _value(f())
        p.data[idx] = orig - step
        down = _value(f())
        p.data[idx] = orig
        num = (up - down) / (2 * step)
        ana = float(analytic[pi][idx])
        resolution = 8 * np.finfo(np.float64).eps * max(abs(up), abs(down)) / (2 * step)
        gap = abs(ana - num)
        raw = gap / max(abs(ana), abs(num), 1e-8)
        raw_worst = max(raw_worst, raw)
        rel = 0.0 if gap <= resolution else raw
        if rel > worst.max_rel_error or not worst.worst_param:
            worst = GradCheckResult(rel, p.name or f"param{pi}", tuple(int(i) for i in idx), ana, num, len(flat))
    for p in params:
        p.zero_grad()
    worst.raw_max_rel_error = raw_worst
    return worst
