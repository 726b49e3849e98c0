"""PK batch sampling, the batch-size doubling scheduler and the noise scale."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class SamplerError(ValueError):
    pass


@dataclass
class ScheduleState:
    batch_size: int
    n_instances: int = 4
    margin: float = 0.3
    max_batch_size: int = 88
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    threshold: float = 0.8

    def __post_init__(self):
        if self.batch_size % self.n_instances:
            raise SamplerError(f"batch_size {self.batch_size} is not a multiple of K={self.n_instances}")
        if self.batch_size > self.max_batch_size:
            raise SamplerError(f"batch_size {self.batch_size} exceeds cap {self.max_batch_size}")

    @classmethod
    def initial(cls, n_instances: int = 4, margin: float = 0.3, max_batch_size: int = 88):
        """Start with two identities per batch."""
        return cls(batch_size=2 * n_instances, n_instances=n_instances, margin=margin,
                   max_batch_size=max_batch_size)


def schedule_step(state: ScheduleState, epoch_mean_loss: float) -> ScheduleState:
    """Double the batch when the epoch loss is below 0.8 m and the cap allows."""
    new_size = state.batch_size
    if epoch_mean_loss < state.threshold * state.margin and 2 * state.batch_size <= state.max_batch_size:
        new_size = 2 * state.batch_size
    return replace(state, batch_size=new_size, epoch=state.epoch + 1,
                   loss_history=state.loss_history + [float(epoch_mean_loss)])


def noise_scale(n: int, b: int, lr: float) -> float:
    """g = lr * (N / B - 1)."""
    if b < 1 or b > n:
        raise ValueError(f"noise_scale needs 1 <= B <= N, got B={b}, N={n}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return lr * (n / b - 1.0)


def _group_by_label(labels: Sequence[int]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        groups.setdefault(int(y), []).append(i)
    return groups


def _draw_instances(rng: np.random.Generator, members: list[int], k: int) -> list[int]:
    replace_ = len(members) < k
    return [members[i] for i in rng.choice(len(members), size=k, replace=replace_)]


def pk_sample(labels: Sequence[int], batch_size: int, k: int,
              seed: int | np.random.Generator) -> np.ndarray:
    """Indices of P = batch_size / K random identities with K instances each."""
    if batch_size % k:
        raise SamplerError(f"batch_size {batch_size} is not a multiple of K={k}")
    p = batch_size // k
    groups = _group_by_label(labels)
    if p < 2 or len(groups) < p:
        raise SamplerError(f"need {max(p, 2)} identities, dataset has {len(groups)}")
    rng = np.random.default_rng(seed)
    ids = sorted(groups)
    chosen = rng.choice(len(ids), size=p, replace=False)
    out = []
    for c in chosen:
        out.extend(_draw_instances(rng, groups[ids[c]], k))
    return np.array(out, dtype=np.int64)


def pk_epoch(labels: Sequence[int], batch_size: int, k: int,
             rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of PK batches: identities shuffled and visited once each.

    A trailing group with fewer than two identities is dropped.
    """
    if batch_size % k:
        raise SamplerError(f"batch_size {batch_size} is not a multiple of K={k}")
    p = batch_size // k
    groups = _group_by_label(labels)
    if len(groups) < 2:
        raise SamplerError("need at least two identities")
    ids = sorted(groups)
    order = rng.permutation(len(ids))
    batches = []
    for start in range(0, len(order), p):
        chunk = order[start:start + p]
        if len(chunk) < 2:
            break
        idx = []
        for c in chunk:
            idx.extend(_draw_instances(rng, groups[ids[c]], k))
        batches.append(np.array(idx, dtype=np.int64))
    return batches


def collapse_detector(loss_history: Sequence[float], m: float, window: int = 5,
                      mean_norm: float | None = None, band: float = 0.005,
                      norm_threshold: float = 0.01) -> bool:
    """True when the last ``window`` losses sit at the margin and embeddings vanish.

    ``mean_norm`` is the mean global-embedding norm; when omitted only the
    loss condition is checked.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(loss_history) < window:
        return False
    pinned = all(abs(x - m) < band for x in loss_history[-window:])
    if mean_norm is None:
        return pinned
    return pinned and mean_norm < norm_threshold


def write_trace(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    """Per-epoch ``epoch batch_size mean_loss noise_scale`` records."""
    lines = ["# epoch batch_size mean_loss noise_scale"]
    for r in rows:
        lines.append(f"{r['epoch']} {r['batch_size']} {r['mean_loss']:.10g} {r['noise_scale']:.10g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path: str | os.PathLike) -> list[dict]:
    rows = []
    for line in open(path).read().splitlines():
        if not line or line.startswith("#"):
            continue
        e, b, l, g = line.split()
        rows.append({"epoch": int(e), "batch_size": int(b), "mean_loss": float(l),
                     "noise_scale": float(g)})
    return rows
