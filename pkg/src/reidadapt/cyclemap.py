"""Cycle-consistent source<->target image translation and the adapted dataset."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .alignednet import CheckpointError, he_uniform, read_params, write_params
from .diffcore import Tensor
from .synthgen import ImageSample

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def to_nchw(images: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


class _Net:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _conv(self, rng, name: str, cin: int, cout: int, k: int = 3, scale: float = 1.0):
        self.params[f"{name}.w"] = dc.parameter(
            he_uniform(rng, (cout, cin, k, k), cin * k * k) * scale, f"{name}.w")
        self.params[f"{name}.b"] = dc.parameter(np.zeros(cout), f"{name}.b")

    def conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return dc.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Generator(_Net):
    """Two strided conv downsamples, residual blocks, two upsamples.

    Both upsamples are nearest-neighbour; the second one lifts a half
    resolution RGB residual, so spatial edits come in 2x2 blocks and cannot
    form checkerboards.  A per-pixel affine colour path from the input is
    added before the output tanh so global colour maps are cheap to express;
    it starts at the identity on centred pixels so G begins close to a
    contrast-softened copy of its input.  Output lies in [0, 1].
    """

    def __init__(self, channels=(16, 32), n_res: int = 2, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self.n_res = n_res
        self._conv(rng, "down1", 3, c1)
        self._conv(rng, "down2", c1, c2)
        for r in range(n_res):
            self._conv(rng, f"res{r}a", c2, c2)
            self._conv(rng, f"res{r}b", c2, c2, scale=0.5)
        self._conv(rng, "up1", c2, c1)
        self._conv(rng, "out", c1, 3, scale=0.1)
        self.params["color.w"] = dc.parameter(np.eye(3), "color.w")
        self.params["color.b"] = dc.parameter(np.zeros((3, 1, 1)), "color.b")

    def forward(self, x: Tensor) -> Tensor:
        h = dc.relu(self.conv(x, "down1", stride=2))
        h = dc.relu(self.conv(h, "down2", stride=2))
        for r in range(self.n_res):
            y = dc.relu(self.conv(h, f"res{r}a"))
            h = h + self.conv(y, f"res{r}b")
        h = dc.relu(self.conv(dc.upsample2d(h), "up1"))
        residual = dc.upsample2d(self.conv(h, "out"))
        n, _, hh, ww = x.shape
        centred = dc.reshape(x * 2.0 - 1.0, (n, 3, hh * ww))
        color = dc.reshape(self.params["color.w"] @ centred, (n, 3, hh, ww))
        z = residual + color + self.params["color.b"]
        return (dc.tanh(z) + 1.0) * 0.5


class Discriminator(_Net):
    """Three-layer patch scorer returning (N, 1, H/4, W/4) real-valued scores."""

    def __init__(self, channels=(8, 16), seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self._conv(rng, "c1", 3, c1)
        self._conv(rng, "c2", c1, c2)
        self._conv(rng, "c3", c2, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = dc.leaky_relu(self.conv(x, "c1", stride=2))
        h = dc.leaky_relu(self.conv(h, "c2", stride=2))
        return self.conv(h, "c3")


@dataclass
class GeneratorPair:
    G: Callable       # source -> target
    F: Callable       # target -> source


@dataclass
class DiscriminatorPair:
    D_s: Callable
    D_t: Callable


@dataclass
class CycleLossBreakdown:
    gan_s_to_t: float
    gan_t_to_s: float
    cycle: float
    lam: float
    total: float


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise dc.ShapeError(f"l1_mean: shape mismatch {a.shape} vs {b.shape}")
    return dc.mean(dc.tabs(a - b))


def cycle_loss(G: Callable, F: Callable, batch_s: Tensor, batch_t: Tensor) -> Tensor:
    """mean |F(G(x_s)) - x_s| + mean |G(F(x_t)) - x_t|."""
    if batch_s.size == 0 or batch_t.size == 0:
        raise ValueError("cycle_loss: empty batch")
    return l1_mean(F(G(batch_s)), batch_s) + l1_mean(G(F(batch_t)), batch_t)


def gan_losses(d_real: Tensor, d_fake: Tensor, objective: str = "lsgan") -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) from discriminator outputs.

    ``lsgan``: d = ((D(real)-1)^2 + D(fake)^2) / 2, g = (D(fake)-1)^2.
    ``bce``: the original log-loss with D outputs read as logits.
    """
    if objective == "lsgan":
        d_loss = (dc.mean(dc.square(d_real - 1.0)) + dc.mean(dc.square(d_fake))) * 0.5
        g_loss = dc.mean(dc.square(d_fake - 1.0))
    elif objective == "bce":
        d_loss = (dc.mean(dc.softplus(-d_real)) + dc.mean(dc.softplus(d_fake))) * 0.5
        g_loss = dc.mean(dc.softplus(-d_fake))
    else:
        raise ValueError(f"unknown GAN objective {objective!r}")
    return d_loss, g_loss


def cycle_objective(gan_s_to_t: float, gan_t_to_s: float, cycle: float, lam: float) -> CycleLossBreakdown:
    return CycleLossBreakdown(gan_s_to_t, gan_t_to_s, cycle, lam,
                              gan_s_to_t + gan_t_to_s + lam * cycle)


@dataclass
class CycleConfig:
    steps: int = 1500
    batch_size: int = 4
    lam: float = 10.0
    objective: str = "lsgan"
    optimizer: str = "adam"
    lr: float = 0.002
    decay_start: float = 0.5    # fraction of steps after which lr falls linearly to 0
    momentum: float = 0.9
    gen_channels: tuple = (16, 32)
    disc_channels: tuple = (8, 16)
    n_res: int = 2
    log_every: int = 100


@dataclass
class CycleGAN:
    G: Generator
    F: Generator
    D_s: Discriminator
    D_t: Discriminator
    trace: list = field(default_factory=list)

    @property
    def generators(self) -> GeneratorPair:
        return GeneratorPair(self.G, self.F)

    @property
    def discriminators(self) -> DiscriminatorPair:
        return DiscriminatorPair(self.D_s, self.D_t)


def build_cyclegan(cfg: CycleConfig, seed: int) -> CycleGAN:
    ss = np.random.SeedSequence([seed, 7]).generate_state(4)
    return CycleGAN(Generator(cfg.gen_channels, cfg.n_res, int(ss[0])),
                    Generator(cfg.gen_channels, cfg.n_res, int(ss[1])),
                    Discriminator(cfg.disc_channels, int(ss[2])),
                    Discriminator(cfg.disc_channels, int(ss[3])))


def _optimizer(params, cfg: CycleConfig):
    if cfg.optimizer == "adam":
        return dc.Adam(params, cfg.lr, betas=(0.5, 0.999))
    if cfg.optimizer == "sgd":
        return dc.SGD(params, cfg.lr, cfg.momentum)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def lr_factor(step: int, steps: int, decay_start: float) -> float:
    """1 until ``decay_start * steps``, then linear down to 0 at the last step."""
    start = int(decay_start * steps)
    if step < start:
        return 1.0
    return 1.0 - (step - start) / max(steps - start, 1)


def train_cyclegan(source: np.ndarray, target: np.ndarray, cfg: CycleConfig,
                   seed: int, model: CycleGAN | None = None) -> CycleGAN:
    """Alternate one discriminator step and one generator step per iteration.

    ``source`` and ``target`` are (N, H, W, 3) pixel stacks; no labels are used.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("train_cyclegan: both domains need images")
    model = model or build_cyclegan(cfg, seed)
    rng = np.random.default_rng([seed, 11])
    gen_params = model.G.parameters() + model.F.parameters()
    disc_params = model.D_s.parameters() + model.D_t.parameters()
    opt_g, opt_d = _optimizer(gen_params, cfg), _optimizer(disc_params, cfg)
    b = cfg.batch_size
    prev_fakes = None
    for step in range(cfg.steps):
        opt_g.lr = opt_d.lr = cfg.lr * lr_factor(step, cfg.steps, cfg.decay_start)
        xs = to_nchw(source[rng.integers(len(source), size=b)])
        xt = to_nchw(target[rng.integers(len(target), size=b)])
        try:
            if prev_fakes is None:
                with dc.no_grad():
                    prev_fakes = (model.G(xs).data, model.F(xt).data)
            fake_t_img, fake_s_img = (Tensor(f) for f in prev_fakes)
            d_t, _ = gan_losses(model.D_t(xt), model.D_t(fake_t_img), cfg.objective)
            d_s, _ = gan_losses(model.D_s(xs), model.D_s(fake_s_img), cfg.objective)
            d_total = d_t + d_s
            dc.backward(d_total)
            opt_d.step()

            fake_t = model.G(xs)
            fake_s = model.F(xt)
            _, g_st = gan_losses(Tensor(np.ones(1)), model.D_t(fake_t), cfg.objective)
            _, g_ts = gan_losses(Tensor(np.ones(1)), model.D_s(fake_s), cfg.objective)
            cyc = l1_mean(model.F(fake_t), xs) + l1_mean(model.G(fake_s), xt)
            total = g_st + g_ts
            if cfg.lam:
                total = total + cyc * cfg.lam
            dc.backward(total)
            opt_g.step()
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(f"cyclegan diverged at step {step}: {exc}") from exc
        for p in disc_params:
            p.grad = None
        prev_fakes = (fake_t.data, fake_s.data)

        parts = cycle_objective(g_st.item(), g_ts.item(), cyc.item(), cfg.lam)
        model.trace.append({"step": step, "d_loss": d_total.item(), "gan_s_to_t": parts.gan_s_to_t,
                            "gan_t_to_s": parts.gan_t_to_s, "cycle": parts.cycle,
                            "total": parts.total})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("cyclegan step %d d %.4f g %.4f cyc %.4f", step, d_total.item(),
                     g_st.item() + g_ts.item(), parts.cycle)
    return model


def apply_generator(G: Callable, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    with dc.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(to_nhwc(G(to_nchw(images[i:i + batch_size])).data))
    return np.clip(np.concatenate(out), 0.0, 1.0)


def translate_dataset(G: Callable, source: Sequence[ImageSample]) -> list[ImageSample]:
    """Source records re-rendered by G; labels and cameras carry over."""
    pixels = apply_generator(G, np.stack([s.pixels for s in source]))
    return [ImageSample(pixels=px, camera_id=s.camera_id, domain="adapted",
                        sample_id=s.sample_id, _person_id=s.person_id, hidden=False)
            for s, px in zip(source, pixels)]


# persistence -------------------------------------------------------------
def save_cyclegan(model: CycleGAN, path: str | os.PathLike, cfg: CycleConfig, **meta) -> None:
    params = {}
    for tag, net in (("G", model.G), ("F", model.F), ("D_s", model.D_s), ("D_t", model.D_t)):
        for k, p in net.params.items():
            params[f"{tag}/{k}"] = p.data
    write_params(path, params, {"kind": "cyclegan", "config": {
        "gen_channels": list(cfg.gen_channels), "disc_channels": list(cfg.disc_channels),
        "n_res": cfg.n_res}, "training": meta})


def load_cyclegan(path: str | os.PathLike) -> CycleGAN:
    params, meta = read_params(path)
    if meta.get("kind") != "cyclegan":
        raise CheckpointError(f"{path}: not a cyclegan checkpoint")
    c = meta["config"]
    cfg = CycleConfig(gen_channels=tuple(c["gen_channels"]),
                      disc_channels=tuple(c["disc_channels"]), n_res=c["n_res"])
    model = build_cyclegan(cfg, 0)
    for tag, net in (("G", model.G), ("F", model.F), ("D_s", model.D_s), ("D_t", model.D_t)):
        for k in net.params:
            net.params[k] = dc.parameter(params[f"{tag}/{k}"], k)
    return model
