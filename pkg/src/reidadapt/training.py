"""Embedding-network training loop driven by the batch scheduler."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .alignednet import AlignedNet
from .metriclearn import TripletBatch, combined_loss
from .scheduler import ScheduleState, noise_scale, pk_epoch, schedule_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    margin: float = 0.3
    n_instances: int = 4
    use_scheduler: bool = True
    max_batch_size: int = 88
    fixed_batch_size: int = 32
    lr_decay: float = 1.0          # per-epoch multiplicative decay (comparison arm)
    use_id: bool = True
    use_local: bool = True
    flip: bool = True


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)
    state: ScheduleState | None = None

    @property
    def loss_history(self) -> list:
        return [r["mean_loss"] for r in self.trace]


def _apply_weight_decay(params, wd: float) -> None:
    if wd:
        for p in params:
            if p.grad is not None and p.ndim > 1:
                p.grad += wd * p.data


def train_embedding(model: AlignedNet, images: np.ndarray, labels: np.ndarray,
                    cfg: TrainConfig, seed: int) -> TrainResult:
    """Train ``model`` on (images, labels) with batch-hard losses.

    The scheduler's loss signal is the epoch mean of the global batch-hard
    term.  With the scheduler off the batch size stays at ``fixed_batch_size``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if cfg.use_scheduler:
        state = ScheduleState.initial(cfg.n_instances, cfg.margin, cfg.max_batch_size)
    else:
        state = ScheduleState(batch_size=cfg.fixed_batch_size, n_instances=cfg.n_instances,
                              margin=cfg.margin,
                              max_batch_size=max(cfg.max_batch_size, cfg.fixed_batch_size))
    params = model.parameters(with_head=cfg.use_id)
    opt = dc.SGD(params, cfg.lr, cfg.momentum)
    result = TrainResult()
    n = len(labels)
    for epoch in range(cfg.epochs):
        g_losses, norms, spreads = [], [], []
        for idx in pk_epoch(labels, state.batch_size, cfg.n_instances, rng):
            batch = images[idx]
            if cfg.flip:
                flips = rng.random(len(idx)) < 0.5
                batch = np.where(flips[:, None, None, None], batch[:, :, ::-1], batch)
            emb = model.forward(batch, with_logits=cfg.use_id)
            out = combined_loss(TripletBatch(emb, labels[idx], cfg.margin),
                                use_id=cfg.use_id, use_local=cfg.use_local)
            dc.backward(out.tensor)
            _apply_weight_decay(params, cfg.weight_decay)
            opt.step()
            g_losses.append(out.global_triplet)
            feat = emb.global_feat.data
            norms.append(float(np.linalg.norm(feat, axis=1).mean()))
            spreads.append(float(np.linalg.norm(feat - feat.mean(axis=0), axis=1).mean()))
        mean_loss = float(np.mean(g_losses))
        row = {"epoch": epoch, "batch_size": state.batch_size, "mean_loss": mean_loss,
               "noise_scale": noise_scale(n, min(state.batch_size, n), opt.lr),
               "mean_norm": float(np.mean(norms)), "mean_spread": float(np.mean(spreads)),
               "lr": opt.lr}
        result.trace.append(row)
        log.debug("epoch %d batch %d loss %.4f norm %.4f", epoch, state.batch_size,
                  mean_loss, row["mean_norm"])
        if cfg.use_scheduler:
            state = schedule_step(state, mean_loss)
        else:
            state = ScheduleState(**{**state.__dict__, "epoch": state.epoch + 1,
                                     "loss_history": state.loss_history + [mean_loss]})
            opt.lr *= cfg.lr_decay
    result.state = state
    return result
