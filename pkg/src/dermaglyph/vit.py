"""Vision-transformer classifier over fingerprint patches.

Pre-norm encoder blocks with multi-head self-attention, a learnable class
token at position 0, fixed sinusoidal positional encodings, and a linear
head on the class token's final representation.  Post-softmax attention
matrices are captured on every forward pass for interpretability.

Initialization is fixed and seeded (uniform within +/- 1/sqrt(fan_in) for
weights, zeros for biases and the class token, ones for layer-norm gains),
drawn in the documented parameter order, so a seed fully determines the
model.  Checkpoints store a JSON header followed by raw little-endian
parameter buffers in that same order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .dataset import Task
from .imgio import FloatImage, GrayImage, resize_bilinear, to_unit_float
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    linear,
    softmax,
)

__all__ = [
    "ViTConfig",
    "ModelParams",
    "AttentionRecord",
    "NonFiniteError",
    "CheckpointError",
    "positional_encoding",
    "patchify",
    "standardize",
    "preprocess_image",
    "init_params",
    "forward_batch",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"DGVT"
_VERSION = 1


class NonFiniteError(Exception):
    """A forward-pass intermediate became NaN or infinite."""


class CheckpointError(Exception):
    """Unreadable, truncated, or incompatible checkpoint file."""


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 512
    n_layers: int = 3
    n_heads: int = 4
    ffn_hidden: int = 1024
    n_classes: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    @classmethod
    def for_task(cls, task: Task, image_size: int = 224) -> "ViTConfig":
        """Task defaults: 512/1024 against controls, 256/512 for KS vs WSS."""
        if task is Task.KS_WSS:
            return cls(image_size=image_size, embed_dim=256, ffn_hidden=512)
        return cls(image_size=image_size, embed_dim=512, ffn_hidden=1024)


def _param_spec(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in the documented serialization order."""
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("patch_proj.w", (cfg.patch_dim, cfg.embed_dim), "weight"),
        ("patch_proj.b", (cfg.embed_dim,), "zeros"),
        ("cls_token", (1, 1, cfg.embed_dim), "zeros"),
    ]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        spec += [
            (p + "ln1.g", (cfg.embed_dim,), "ones"),
            (p + "ln1.b", (cfg.embed_dim,), "zeros"),
            (p + "attn.wq", (cfg.embed_dim, cfg.embed_dim), "weight"),
            (p + "attn.bq", (cfg.embed_dim,), "zeros"),
            (p + "attn.wk", (cfg.embed_dim, cfg.embed_dim), "weight"),
            (p + "attn.bk", (cfg.embed_dim,), "zeros"),
            (p + "attn.wv", (cfg.embed_dim, cfg.embed_dim), "weight"),
            (p + "attn.bv", (cfg.embed_dim,), "zeros"),
            (p + "attn.wo", (cfg.embed_dim, cfg.embed_dim), "weight"),
            (p + "attn.bo", (cfg.embed_dim,), "zeros"),
            (p + "ln2.g", (cfg.embed_dim,), "ones"),
            (p + "ln2.b", (cfg.embed_dim,), "zeros"),
            (p + "ffn.w1", (cfg.embed_dim, cfg.ffn_hidden), "weight"),
            (p + "ffn.b1", (cfg.ffn_hidden,), "zeros"),
            (p + "ffn.w2", (cfg.ffn_hidden, cfg.embed_dim), "weight"),
            (p + "ffn.b2", (cfg.embed_dim,), "zeros"),
        ]
    spec += [
        ("final_ln.g", (cfg.embed_dim,), "ones"),
        ("final_ln.b", (cfg.embed_dim,), "zeros"),
        ("head.w", (cfg.embed_dim, cfg.n_classes), "weight"),
        ("head.b", (cfg.n_classes,), "zeros"),
    ]
    return spec


class ModelParams:
    """Named parameter tensors in the documented order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def param_list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors.keys())


def init_params(cfg: ViTConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Seeded initialization; draws happen in serialization order."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in _param_spec(cfg):
        if kind == "weight":
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


def positional_encoding(seq_len: int, embed_dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal encoding; position 0 is the class token."""
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i = np.arange(0, embed_dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / embed_dim)
    pe = np.zeros((seq_len, embed_dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : embed_dim // 2])
    return pe.astype(dtype)


def standardize(data: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit variance; a flat image maps to zeros."""
    mean = data.mean()
    std = data.std()
    if std < 1e-12:
        return np.zeros_like(data)
    return (data - mean) / std


def patchify(data: np.ndarray, patch_size: int) -> np.ndarray:
    """Tile a (S, S) image into (n_patches, patch_size^2) row-major rows."""
    h, w = data.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ValueError(f"image {data.shape} not divisible into {patch_size}x{patch_size} patches")
    gy, gx = h // patch_size, w // patch_size
    return (
        data.reshape(gy, patch_size, gx, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(gy * gx, patch_size * patch_size)
    )


def preprocess_image(img: GrayImage, cfg: ViTConfig, dtype=np.float32) -> np.ndarray:
    """Model input: unit floats, bilinear resize to config size, standardize."""
    unit = to_unit_float(img)
    if unit.width != cfg.image_size or unit.height != cfg.image_size:
        unit = resize_bilinear(unit, cfg.image_size, cfg.image_size)
    return standardize(unit.data).astype(dtype)


@dataclass(frozen=True)
class AttentionRecord:
    """Post-softmax attention for one image: n_layers arrays of (heads, T, T)."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        for a in self.layers:
            if a.ndim != 3 or a.shape[-1] != a.shape[-2]:
                raise ValueError(f"attention matrices must be (heads, T, T), got {a.shape}")


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


def embed_tokens(params: ModelParams, cfg: ViTConfig, images: np.ndarray) -> Tensor:
    """Token matrix before the encoder stack: [class; patches]W + PE."""
    b, h, w = images.shape
    if (h, w) != (cfg.image_size, cfg.image_size):
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} input, got {h}x{w}")
    ps, g = cfg.patch_size, cfg.grid
    patches = (
        images.reshape(b, g, ps, g, ps).transpose(0, 1, 3, 2, 4).reshape(b, g * g, ps * ps)
    )
    x = linear(Tensor(patches), params["patch_proj.w"], params["patch_proj.b"])
    cls = broadcast_to(params["cls_token"], (b, 1, cfg.embed_dim))
    x = concat([cls, x], axis=1)
    pe = positional_encoding(cfg.seq_len, cfg.embed_dim, dtype=images.dtype)
    return x + Tensor(pe)


def forward_batch(
    params: ModelParams, cfg: ViTConfig, images: np.ndarray
) -> tuple[Tensor, list[np.ndarray]]:
    """Run the encoder on a batch of preprocessed (B, S, S) images.

    Returns (logits tensor of shape (B, n_classes), attention) where
    attention holds one (B, heads, T, T) post-softmax array per layer.
    """
    b = images.shape[0]
    t_len, d, n_h = cfg.seq_len, cfg.embed_dim, cfg.n_heads
    dh = d // n_h
    scale = 1.0 / math.sqrt(dh)

    x = embed_tokens(params, cfg, images)
    attention: list[np.ndarray] = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = linear(h, params[p + "attn.wq"], params[p + "attn.bq"])
        k = linear(h, params[p + "attn.wk"], params[p + "attn.bk"])
        v = linear(h, params[p + "attn.wv"], params[p + "attn.bv"])
        q = q.reshape(b, t_len, n_h, dh).transpose((0, 2, 1, 3))
        k = k.reshape(b, t_len, n_h, dh).transpose((0, 2, 1, 3))
        v = v.reshape(b, t_len, n_h, dh).transpose((0, 2, 1, 3))
        scores = (q @ k.transpose((0, 1, 3, 2))) * np.asarray(scale, dtype=images.dtype)
        attn = softmax(scores, axis=-1)
        attention.append(attn.data)
        ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape(b, t_len, d)
        x = x + linear(ctx, params[p + "attn.wo"], params[p + "attn.bo"])
        h2 = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        f = linear(gelu(linear(h2, params[p + "ffn.w1"], params[p + "ffn.b1"])),
                   params[p + "ffn.w2"], params[p + "ffn.b2"])
        x = x + f
        _check_finite(x.data, f"encoder block {i} output")

    out = layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    cls_out = out[:, 0, :]
    logits = linear(cls_out, params["head.w"], params["head.b"])
    _check_finite(logits.data, "classification head output")
    return logits, attention


def forward(
    params: ModelParams, cfg: ViTConfig, image: np.ndarray
) -> tuple[np.ndarray, AttentionRecord]:
    """Single-image forward pass: (logits vector, attention record)."""
    logits, attention = forward_batch(params, cfg, image[None, :, :])
    record = AttentionRecord(layers=tuple(a[0] for a in attention))
    return logits.data[0], record


# -- checkpoint serialization ---------------------------------------------


def save_checkpoint(
    params: ModelParams,
    cfg: ViTConfig,
    path,
    task: Task | None = None,
    train_seed: int = 0,
    fold: int | None = None,
) -> None:
    """Write magic, version, JSON header, then raw little-endian arrays."""
    header = {
        "config": asdict(cfg),
        "task": task.key if task is not None else None,
        "train_seed": int(train_seed),
        "fold": fold,
        "dtype": "float32",
        "params": params.names(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for name in params.names():
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ViTConfig, dict]:
    """Read a checkpoint; returns (params, config, header metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
        cfg = ViTConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    expected_names = [name for name, _, _ in _param_spec(cfg)]
    if header.get("params") != expected_names:
        raise CheckpointError(f"{path}: parameter list does not match config")
    offset = 12 + header_len
    tensors: dict[str, Tensor] = {}
    for name, shape, _ in _param_spec(cfg):
        n_bytes = int(np.prod(shape)) * 4
        chunk = raw[offset : offset + n_bytes]
        if len(chunk) != n_bytes:
            raise CheckpointError(f"{path}: truncated parameter data at {name}")
        data = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
        offset += n_bytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(tensors), cfg, header
