"""Two-branch embedding network: small conv backbone, global and stripe heads."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

CHECKPOINT_MAGIC = b"RDCK"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class NetConfig:
    channels: tuple = (16, 32, 64)
    image_height: int = 64
    image_width: int = 32
    num_classes: int = 0          # 0 disables the identity head
    normalize_stripes: bool = True

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    @property
    def stripe_count(self) -> int:
        return self.image_height // 2 ** len(self.channels)


@dataclass
class Embeddings:
    """Batched network output.  ``global_feat`` is (N, C), ``stripes`` (N, H, C)."""
    global_feat: Tensor
    stripes: Tensor
    logits: Tensor | None = None

    def __len__(self) -> int:
        return self.global_feat.shape[0]


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def pool_branches(fmap: Tensor, normalize: bool = True) -> tuple[Tensor, Tensor]:
    """Global average pool and horizontal max pool of an (N, C, H, W) map.

    Returns ``(global (N, C), stripes (N, H, C))``; stripe rows are optionally
    L2-normalised.
    """
    g = dc.mean(fmap, axis=(2, 3))
    s = dc.transpose(dc.tmax(fmap, axis=3), (0, 2, 1))
    if normalize:
        norm = dc.sqrt(dc.tsum(dc.square(s), axis=2, keepdims=True) + 1e-12)
        s = s / norm
    return g, s


class AlignedNet:
    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        self.config = config or NetConfig()
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cin = 3
        for i, cout in enumerate(self.config.channels):
            self.params[f"conv{i}.w"] = dc.parameter(
                he_uniform(rng, (cout, cin, 3, 3), cin * 9), f"conv{i}.w")
            self.params[f"conv{i}.b"] = dc.parameter(np.zeros(cout), f"conv{i}.b")
            cin = cout
        if self.config.num_classes:
            self.reset_classifier(self.config.num_classes, seed=seed + 1)

    def reset_classifier(self, num_classes: int, seed: int = 0) -> None:
        """Fresh identity head (needed whenever the label space changes)."""
        c = self.config.embed_dim
        rng = np.random.default_rng(seed)
        self.config.num_classes = num_classes
        self.params["classifier.w"] = dc.parameter(
            he_uniform(rng, (c, num_classes), c) * 0.1, "classifier.w")
        self.params["classifier.b"] = dc.parameter(np.zeros(num_classes), "classifier.b")

    def parameters(self, with_head: bool = True) -> list[Tensor]:
        return [p for k, p in self.params.items() if with_head or not k.startswith("classifier")]

    def feature_map(self, images: np.ndarray) -> Tensor:
        cfg = self.config
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.image_height, cfg.image_width, 3):
            raise dc.ShapeError(
                f"expected images of shape (N, {cfg.image_height}, {cfg.image_width}, 3), "
                f"got {images.shape}")
        h = Tensor(images.transpose(0, 3, 1, 2))
        for i in range(len(cfg.channels)):
            h = dc.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            h = dc.maxpool2d(dc.relu(h), 2)
        return h

    def forward(self, images: np.ndarray, with_logits: bool = True) -> Embeddings:
        fmap = self.feature_map(images)
        g, s = pool_branches(fmap, self.config.normalize_stripes)
        logits = None
        if with_logits and "classifier.w" in self.params:
            logits = g @ self.params["classifier.w"] + self.params["classifier.b"]
        return Embeddings(g, s, logits)

    __call__ = forward

    def embed(self, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Inference-only global and stripe features as numpy arrays."""
        gs, ss = [], []
        with dc.no_grad():
            for i in range(0, len(images), batch_size):
                e = self.forward(images[i:i + batch_size], with_logits=False)
                gs.append(e.global_feat.data)
                ss.append(e.stripes.data)
        return np.concatenate(gs), np.concatenate(ss)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()[:16]


# checkpoint format -------------------------------------------------------
def write_params(path: str | os.PathLike, params: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned header, JSON metadata block, then named float64 blocks."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    blob = json.dumps(meta, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def read_params(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        off = 12
        (mlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        meta = json.loads(raw[off:off + mlen].decode())
        off += mlen
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            nbytes = 8 * int(np.prod(shape))
            if off + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated parameter block {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8,
                                         offset=off).reshape(shape).astype(np.float64)
            off += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last block")
    return params, meta


def save_checkpoint(model: AlignedNet, path: str | os.PathLike, **metadata) -> None:
    cfg = model.config
    meta = {"kind": "alignednet", "config": {
        "channels": list(cfg.channels), "image_height": cfg.image_height,
        "image_width": cfg.image_width, "num_classes": cfg.num_classes,
        "normalize_stripes": cfg.normalize_stripes}, "training": metadata}
    write_params(path, {k: p.data for k, p in model.params.items()}, meta)


def load_checkpoint(path: str | os.PathLike) -> AlignedNet:
    params, meta = read_params(path)
    if meta.get("kind") != "alignednet":
        raise CheckpointError(f"{path}: not an embedding-network checkpoint")
    c = meta["config"]
    cfg = NetConfig(channels=tuple(c["channels"]), image_height=c["image_height"],
                    image_width=c["image_width"], num_classes=0,
                    normalize_stripes=c["normalize_stripes"])
    model = AlignedNet(cfg)
    model.config.num_classes = c["num_classes"]
    model.params = {k: dc.parameter(v, k) for k, v in params.items()}
    model.metadata = meta.get("training", {})
    return model
