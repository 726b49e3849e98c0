"""Central finite-difference checks for diffcore graphs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    passed: bool


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6,
                 entries: Sequence[tuple] | None = None) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored.

    With ``entries`` only those indices are probed; the rest stay zero.
    """
    g = np.zeros_like(x)
    if entries is None:
        entries = list(np.ndindex(x.shape))
    for i in entries:
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grad(fn: Callable[..., dc.Tensor], inputs: Sequence[np.ndarray], rtol: float = 1e-3,
               atol: float = 1e-7, h: float = 1e-6, max_entries: int | None = None,
               seed: int = 0) -> GradCheckResult:
    """Compare backward() against central differences for a scalar ``fn``.

    An entry passes when ``|a - n| <= rtol * max(|a|, |n|) + atol``; the
    small ``atol`` only absorbs round-off on entries that are exactly zero.
    ``max_entries`` caps the probed coordinates per input (a random subset),
    which keeps checks through whole networks affordable.
    """
    arrays = [np.array(a, dtype=float) for a in inputs]
    params = [dc.parameter(a) for a in arrays]
    out = fn(*params)
    dc.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value() -> float:
        with dc.no_grad():
            return fn(*[dc.Tensor(a) for a in arrays]).item()

    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, ok = 0.0, 0.0, True
    for a, arr in zip(analytic, arrays):
        entries = list(np.ndindex(arr.shape))
        if max_entries is not None and len(entries) > max_entries:
            entries = [entries[k] for k in rng.choice(len(entries), max_entries, replace=False)]
        mask = np.zeros(arr.shape, dtype=bool)
        for i in entries:
            mask[i] = True
        num = numeric_grad(value, arr, h, entries)
        a, num = a[mask], num[mask]
        diff = np.abs(a - num)
        scale = np.maximum(np.abs(a), np.abs(num))
        ok &= bool(np.all(diff <= rtol * scale + atol))
        worst_abs = max(worst_abs, float(diff.max(initial=0.0)))
        rel = np.where(scale > atol, diff / np.maximum(scale, 1e-300), 0.0)
        worst_rel = max(worst_rel, float(rel.max(initial=0.0)))
    return GradCheckResult(worst_rel, worst_abs, ok)
