"""Large-batch collapse study: fixed huge batch versus the doubling scheduler.

Both arms train the same network on the same synthetic source domain with the
global batch-hard triplet term only, which is the loss the collapse argument
is about.  The fixed arm starts (and stays) at one batch holding every
identity; the scheduler arm starts at two identities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignednet import AlignedNet, NetConfig
from .scheduler import collapse_detector
from .synthgen import default_source_spec, generate_domain, stack_pixels, visible_labels
from .training import TrainConfig, train_embedding


@dataclass
class CollapseConfig:
    num_identities: int = 40
    instances_per_camera: int = 4
    epochs: int = 30
    lr: float = 0.02
    margin: float = 0.3
    n_instances: int = 4
    max_batch_size: int = 88
    label_noise: float = 0.0        # fraction of training labels replaced at random
    window: int = 5

    @property
    def full_batch(self) -> int:
        return self.num_identities * self.n_instances


@dataclass
class CollapseResult:
    seed: int
    use_scheduler: bool
    collapsed: bool
    loss_history: list
    final_norm: float
    final_spread: float
    batch_sizes: list = field(default_factory=list)


def _noisy_labels(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    labels = labels.copy()
    flip = rng.random(len(labels)) < fraction
    labels[flip] = rng.integers(0, labels.max() + 1, int(flip.sum()))
    return labels


def collapse_run(seed: int, use_scheduler: bool, cfg: CollapseConfig | None = None) -> CollapseResult:
    cfg = cfg or CollapseConfig()
    spec = default_source_spec(num_identities=cfg.num_identities,
                               instances_per_camera=cfg.instances_per_camera)
    samples = generate_domain(spec, seed)
    labels = visible_labels(samples)
    if cfg.label_noise:
        labels = _noisy_labels(labels, cfg.label_noise, np.random.default_rng([seed, 3]))
    net = AlignedNet(NetConfig(), seed=seed)
    tcfg = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, margin=cfg.margin, n_instances=cfg.n_instances,
                       use_scheduler=use_scheduler, fixed_batch_size=cfg.full_batch,
                       max_batch_size=cfg.max_batch_size if use_scheduler else cfg.full_batch,
                       use_id=False, use_local=False)
    res = train_embedding(net, stack_pixels(samples), labels, tcfg, seed)
    last = res.trace[-1]
    flag = collapse_detector(res.loss_history, cfg.margin, cfg.window, mean_norm=last["mean_norm"])
    return CollapseResult(seed, use_scheduler, flag, res.loss_history, last["mean_norm"],
                          last["mean_spread"], [r["batch_size"] for r in res.trace])
