"""Synthetic two-domain camera networks with known identities.

Each identity is a parametric figure (head, torso, legs, optional bag) drawn
over a domain-specific background.  A domain differs from another by a global
colour affine map and a background texture, while the identity model is
shared.  Target-domain labels are stored but can only be read through
:func:`ground_truth`, which counts every read per active stage.
"""
from __future__ import annotations

import contextvars
import os
import struct
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IMG_H, IMG_W = 64, 32
DOMAINS = ("source", "target", "adapted")


class SpecError(ValueError):
    pass


class LabelQuarantineError(PermissionError):
    """Raised when code outside evaluation touches a hidden target label."""


class SplitError(ValueError):
    pass


class DatasetFormatError(IOError):
    pass


# label quarantine --------------------------------------------------------
_stage = contextvars.ContextVar("reid_stage", default="unscoped")
LABEL_AUDIT: Counter = Counter()


@contextmanager
def stage_scope(name: str):
    """Attribute ground-truth reads inside the block to stage ``name``."""
    token = _stage.set(name)
    try:
        yield
    finally:
        _stage.reset(token)


def current_stage() -> str:
    return _stage.get()


@dataclass
class ImageSample:
    pixels: np.ndarray
    camera_id: int
    domain: str
    sample_id: int
    _person_id: int = field(repr=False)
    hidden: bool = False

    @property
    def person_id(self) -> int:
        if self.hidden:
            raise LabelQuarantineError(
                f"sample {self.sample_id}: target labels are evaluation-only")
        return self._person_id


def ground_truth(samples: Sequence[ImageSample]) -> np.ndarray:
    """Identity labels of ``samples``, hidden ones included; audited per stage."""
    n_hidden = sum(s.hidden for s in samples)
    if n_hidden:
        LABEL_AUDIT[current_stage()] += n_hidden
    return np.array([s._person_id for s in samples], dtype=np.int64)


def visible_labels(samples: Sequence[ImageSample]) -> np.ndarray:
    return np.array([s.person_id for s in samples], dtype=np.int64)


# domain description ------------------------------------------------------
@dataclass
class Palette:
    """Global colour affine map ``rgb -> matrix @ rgb + bias``."""
    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    bias: tuple = (0.0, 0.0, 0.0)


@dataclass
class Texture:
    kind: str = "smooth"            # "smooth" gradient or "granular" floor
    base: tuple = (0.55, 0.55, 0.6)
    amplitude: float = 0.1
    grain: int = 2


@dataclass
class DomainSpec:
    num_identities: int = 40
    instances_per_camera: int = 4
    num_cameras: int = 2
    palette: Palette = field(default_factory=Palette)
    texture: Texture = field(default_factory=Texture)
    noise_level: float = 0.02
    domain: str = "source"

    def validate(self) -> None:
        if self.num_identities < 1 or self.instances_per_camera < 1:
            raise SpecError("num_identities and instances_per_camera must be positive")
        if self.num_cameras < 2:
            raise SpecError("num_cameras must be >= 2 for cross-view matching")
        if self.noise_level < 0:
            raise SpecError("noise_level must be non-negative")
        if self.domain not in DOMAINS:
            raise SpecError(f"unknown domain tag {self.domain!r}")
        if self.texture.kind not in ("smooth", "granular"):
            raise SpecError(f"unknown texture {self.texture.kind!r}")


def default_source_spec(**kw) -> DomainSpec:
    return DomainSpec(
        texture=Texture(kind="smooth", base=(0.62, 0.6, 0.55), amplitude=0.12),
        palette=Palette(), domain="source", **kw)


def default_target_spec(**kw) -> DomainSpec:
    # darker, colour-mixed palette over a granular floor
    return DomainSpec(
        texture=Texture(kind="granular", base=(0.35, 0.4, 0.3), amplitude=0.08, grain=2),
        palette=Palette(matrix=((0.55, 0.35, 0.1), (0.1, 0.5, 0.3), (0.25, 0.15, 0.45)),
                        bias=(0.15, 0.1, 0.05)),
        domain="target", **kw)


# rendering ---------------------------------------------------------------
@dataclass
class _Identity:
    skin: np.ndarray
    hair: np.ndarray
    shirt: np.ndarray
    pants: np.ndarray
    pattern: int           # 0 plain, 1 horizontal stripes, 2 vertical band
    pattern_color: np.ndarray
    bag: int               # 0 none, 1 left, 2 right
    bag_color: np.ndarray
    height: int
    width: int
    torso_frac: float


def _sample_identity(rng: np.random.Generator) -> _Identity:
    return _Identity(
        skin=rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6]),
        hair=rng.uniform(0.0, 0.5, 3),
        shirt=rng.uniform(0.0, 1.0, 3),
        pants=rng.uniform(0.0, 1.0, 3),
        pattern=int(rng.integers(0, 3)),
        pattern_color=rng.uniform(0.0, 1.0, 3),
        bag=int(rng.integers(0, 3)),
        bag_color=rng.uniform(0.0, 1.0, 3),
        height=int(rng.integers(46, 56)),
        width=int(rng.integers(10, 16)),
        torso_frac=float(rng.uniform(0.38, 0.5)),
    )


def _background(tex: Texture, rng: np.random.Generator) -> np.ndarray:
    base = np.asarray(tex.base, dtype=float)
    rows = np.linspace(-1.0, 1.0, IMG_H)[:, None, None]
    if tex.kind == "smooth":
        img = base + tex.amplitude * 0.5 * rows * np.ones((1, IMG_W, 1))
        return np.broadcast_to(img, (IMG_H, IMG_W, 3)).copy()
    g = tex.grain
    coarse = rng.uniform(-1.0, 1.0, ((IMG_H + g - 1) // g, (IMG_W + g - 1) // g, 1))
    grains = coarse.repeat(g, axis=0).repeat(g, axis=1)[:IMG_H, :IMG_W]
    return base + tex.amplitude * grains * np.array([1.0, 0.9, 0.8])


def _camera_view(camera_id: int) -> tuple[int, int, float]:
    """Deterministic per-camera vertical shift, horizontal shift and gain."""
    dy = (0, 5, -3, 3)[camera_id % 4]
    dx = (0, -2, 2, 1)[camera_id % 4]
    gain = (1.0, 0.85, 1.1, 0.95)[camera_id % 4]
    return dy, dx, gain


def _render(ident: _Identity, camera_id: int, rng: np.random.Generator,
            spec: DomainSpec) -> np.ndarray:
    img = _background(spec.texture, rng)
    dy, dx, gain = _camera_view(camera_id)
    dy += int(rng.integers(-2, 3))
    dx += int(rng.integers(-1, 2))
    top = (IMG_H - ident.height) // 2 + dy
    cx = IMG_W // 2 + dx
    head_h = max(6, ident.height // 6)
    torso_h = int(ident.height * ident.torso_frac)
    hw = ident.width // 2

    def box(r0, r1, c0, c1, color):
        r0, r1 = max(r0, 0), min(r1, IMG_H)
        c0, c1 = max(c0, 0), min(c1, IMG_W)
        if r0 < r1 and c0 < c1:
            img[r0:r1, c0:c1] = color

    # head: hair cap over skin
    box(top, top + head_h, cx - 3, cx + 3, ident.skin)
    box(top, top + head_h // 3 + 1, cx - 3, cx + 3, ident.hair)
    t0 = top + head_h
    box(t0, t0 + torso_h, cx - hw, cx + hw, ident.shirt)
    if ident.pattern == 1:
        for r in range(t0 + 2, t0 + torso_h, 4):
            box(r, r + 2, cx - hw, cx + hw, ident.pattern_color)
    elif ident.pattern == 2:
        box(t0, t0 + torso_h, cx - 2, cx + 2, ident.pattern_color)
    l0 = t0 + torso_h
    leg_h = top + ident.height - l0
    spread = int(rng.integers(0, 3))
    box(l0, l0 + leg_h, cx - hw + 1 - spread, cx - 1, ident.pants)
    box(l0, l0 + leg_h, cx + 1, cx + hw - 1 + spread, ident.pants)
    if ident.bag:
        side = -1 if ident.bag == 1 else 1
        c = cx + side * (hw + 2)
        box(t0 + torso_h // 3, t0 + torso_h // 3 + 8, c - 2, c + 3, ident.bag_color)

    img = img * gain * rng.uniform(0.92, 1.08)
    m = np.asarray(spec.palette.matrix, dtype=float)
    img = img @ m.T + np.asarray(spec.palette.bias, dtype=float)
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_domain(spec: DomainSpec, seed: int) -> list[ImageSample]:
    """Render ``num_identities x num_cameras x instances_per_camera`` samples."""
    spec.validate()
    root = np.random.SeedSequence([seed, DOMAINS.index(spec.domain)])
    id_seq, img_seq = root.spawn(2)
    id_rng = np.random.default_rng(id_seq)
    identities = [_sample_identity(id_rng) for _ in range(spec.num_identities)]
    img_rng = np.random.default_rng(img_seq)
    hidden = spec.domain == "target"
    out = []
    for pid, ident in enumerate(identities):
        for cam in range(spec.num_cameras):
            for _ in range(spec.instances_per_camera):
                out.append(ImageSample(
                    pixels=_render(ident, cam, img_rng, spec), camera_id=cam,
                    domain=spec.domain, sample_id=len(out), _person_id=pid, hidden=hidden))
    return out


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    return np.stack([s.pixels for s in samples])


def channel_histograms(samples: Sequence[ImageSample], bins: int = 32) -> np.ndarray:
    px = stack_pixels(samples).reshape(-1, 3)
    return np.stack([np.histogram(px[:, c], bins=bins, range=(0.0, 1.0))[0] / len(px)
                     for c in range(3)])


def histogram_distance(a: Sequence[ImageSample], b: Sequence[ImageSample],
                       bins: int = 32) -> float:
    """Mean over channels of the L1 distance between normalised pixel histograms."""
    return float(np.abs(channel_histograms(a, bins) - channel_histograms(b, bins)).sum(axis=1).mean())


# query / gallery ---------------------------------------------------------
def split_query_gallery(samples: Sequence[ImageSample], seed: int,
                        labels: np.ndarray | None = None):
    """One query per (identity, camera); the rest form the gallery.

    Labels are read through the audited accessor unless given explicitly.
    Returns ``(query, gallery)`` as lists of samples.
    """
    if labels is None:
        labels = ground_truth(samples)
    order = sorted(range(len(samples)), key=lambda i: samples[i].sample_id)
    groups: dict[int, dict[int, list[int]]] = {}
    for i in order:
        groups.setdefault(int(labels[i]), {}).setdefault(samples[i].camera_id, []).append(i)
    rng = np.random.default_rng(seed)
    query, gallery = [], []
    for pid in sorted(groups):
        cams = groups[pid]
        if len(cams) < 2:
            raise SplitError(f"identity {pid} appears in only one camera")
        for cam in sorted(cams):
            idx = cams[cam]
            q = idx[int(rng.integers(len(idx)))]
            query.append(samples[q])
            gallery.extend(samples[i] for i in idx if i != q)
    return query, gallery


# serialization -----------------------------------------------------------
_REC_MAGIC = b"RIMG"


def save_dataset(samples: Sequence[ImageSample], directory: str | os.PathLike) -> Path:
    """One binary record per sample plus a line-oriented manifest."""
    d = Path(directory)
    (d / "records").mkdir(parents=True, exist_ok=True)
    lines = ["# sample_id person_id camera_id domain"]
    for s in samples:
        arr = np.ascontiguousarray(s.pixels, dtype="<f8")
        header = _REC_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        (d / "records" / f"{s.sample_id:06d}.bin").write_bytes(header + arr.tobytes())
        lines.append(f"{s.sample_id} {s._person_id} {s.camera_id} {s.domain}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return d


def _read_record(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:4] != _REC_MAGIC or len(raw) < 8:
        raise DatasetFormatError(f"{path}: bad record header")
    ndim = struct.unpack_from("<I", raw, 4)[0]
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    off = 8 + 4 * ndim
    count = int(np.prod(shape))
    if len(raw) - off != 8 * count:
        raise DatasetFormatError(f"{path}: truncated record")
    return np.frombuffer(raw, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


def load_dataset(directory: str | os.PathLike) -> list[ImageSample]:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise DatasetFormatError(f"{d}: no manifest.txt")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        sid, pid, cam, dom = line.split()
        sid = int(sid)
        out.append(ImageSample(
            pixels=_read_record(d / "records" / f"{sid:06d}.bin"), camera_id=int(cam),
            domain=dom, sample_id=sid, _person_id=int(pid), hidden=dom == "target"))
    return out
