"""ViT-style encoder: patch embedding, CLS token, pre-norm blocks.

Parameters live in a flat ``dict[str, Tensor]`` of 2-D arrays so the same
mapping feeds the optimizer and the checkpoint writer.  The batched path
(``embed_batch`` / ``block_forward``) is what training uses; the
``TokenSequence`` helpers wrap it for single images, where pruned tokens are
physically removed instead of masked.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from . import numcore as nc
from .numcore import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VitConfig:
    image_side: int = 32
    patch_side: int = 8
    channels: int = 1
    embed_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 2
    mlp_ratio: float = 4.0
    num_known_classes: int = 4
    num_total_classes: int = 8

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 2:
            raise ConfigError("num_blocks must be >= 2 (TIME taps blocks 1..L-1)")
        if not 0 < self.num_known_classes < self.num_total_classes:
            raise ConfigError("need 0 < num_known_classes < num_total_classes")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


# ViT-B/16 geometry, used by the cost estimator only.  Class counts follow CUB.
VIT_B16 = VitConfig(
    image_side=224,
    patch_side=16,
    channels=3,
    embed_dim=768,
    num_blocks=12,
    num_heads=12,
    mlp_ratio=4.0,
    num_known_classes=100,
    num_total_classes=200,
)
NAMED_CONFIGS = {"desk": VitConfig(), "vit_b16": VIT_B16}


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def block_param_shapes(cfg: VitConfig, i: int) -> dict[str, tuple[int, int]]:
    d, h = cfg.embed_dim, cfg.mlp_hidden
    p = f"blocks.{i}."
    return {
        p + "norm1.gain": (1, d),
        p + "norm1.bias": (1, d),
        p + "attn.qkv.weight": (d, 3 * d),
        p + "attn.qkv.bias": (1, 3 * d),
        p + "attn.proj.weight": (d, d),
        p + "attn.proj.bias": (1, d),
        p + "norm2.gain": (1, d),
        p + "norm2.bias": (1, d),
        p + "mlp.fc1.weight": (d, h),
        p + "mlp.fc1.bias": (1, h),
        p + "mlp.fc2.weight": (h, d),
        p + "mlp.fc2.bias": (1, d),
    }


def backbone_param_shapes(cfg: VitConfig) -> dict[str, tuple[int, int]]:
    d = cfg.embed_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (1, d),
        "cls_token": (1, d),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for i in range(cfg.num_blocks):
        shapes.update(block_param_shapes(cfg, i))
    shapes["norm.gain"] = (1, d)
    shapes["norm.bias"] = (1, d)
    return shapes


def init_backbone(cfg: VitConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in backbone_param_shapes(cfg).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        elif name == "patch_embed.weight":
            # lecun-normal so patch content survives at unit scale into block 1
            value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            value = trunc_normal(rng, shape)
        params[name] = nc.parameter(value, name)
    return params


def last_block_prefixes(cfg: VitConfig) -> tuple[str, ...]:
    return (f"blocks.{cfg.num_blocks - 1}.", "norm.")


def frozen_names(params: dict[str, Tensor], cfg: VitConfig) -> list[str]:
    """Backbone tensors held fixed when only the last block is fine-tuned."""
    keep = last_block_prefixes(cfg)
    backbone = backbone_param_shapes(cfg)
    return [n for n in params if n in backbone and not n.startswith(keep)]


# ---------------------------------------------------------------------------
# batched path
# ---------------------------------------------------------------------------


def image_to_patches(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, N, P*P*C), grid in row-major order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.image_side, cfg.image_side, cfg.channels)
    if images.shape[1:] != expected:
        raise nc.DimensionError(f"image shape {images.shape[1:]} does not match config {expected}")
    b, g, p, c = images.shape[0], cfg.grid_side, cfg.patch_side, cfg.channels
    x = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * c)


def embed_batch(images: np.ndarray, params: dict[str, Tensor], cfg: VitConfig) -> Tensor:
    """Tokens (B, N+1, D) with CLS at row 0 and positional embeddings added."""
    patches = image_to_patches(images, cfg)
    b = patches.shape[0]
    tokens = nc.matmul(patches, params["patch_embed.weight"]) + params["patch_embed.bias"]
    cls = params["cls_token"] + nc.Tensor(np.zeros((b, 1, 1)))
    seq = nc.concat([cls, tokens], axis=1)
    return seq + params["pos_embed"]


def key_mask_bias(keep: np.ndarray | None) -> np.ndarray | None:
    """(B, S) keep flags -> additive (B, 1, 1, S) attention bias."""
    if keep is None:
        return None
    return np.where(keep, 0.0, nc.MASK_FILL)[:, None, None, :]


def block_forward(
    x: Tensor, params: dict[str, Tensor], cfg: VitConfig, i: int, keep: np.ndarray | None = None
) -> tuple[Tensor, np.ndarray]:
    """One pre-norm block on (B, S, D).  Returns new tokens and (B, H, S, S) attention."""
    p = f"blocks.{i}."
    b, s, d = x.shape
    nh, hd = cfg.num_heads, cfg.head_dim

    h = nc.layernorm(x, params[p + "norm1.gain"], params[p + "norm1.bias"])
    qkv = nc.matmul(h, params[p + "attn.qkv.weight"]) + params[p + "attn.qkv.bias"]
    qkv = nc.transpose(qkv.reshape(b, s, 3, nh, hd), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = nc.matmul(q, nc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
    bias = key_mask_bias(keep)
    if bias is not None:
        logits = logits + bias
    attn = nc.softmax_rows(logits)
    mixed = nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)).reshape(b, s, d)
    x = x + nc.matmul(mixed, params[p + "attn.proj.weight"]) + params[p + "attn.proj.bias"]

    h = nc.layernorm(x, params[p + "norm2.gain"], params[p + "norm2.bias"])
    h = nc.gelu(nc.matmul(h, params[p + "mlp.fc1.weight"]) + params[p + "mlp.fc1.bias"])
    x = x + nc.matmul(h, params[p + "mlp.fc2.weight"]) + params[p + "mlp.fc2.bias"]
    return x, attn.value


def final_norm(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    return nc.layernorm(x, params["norm.gain"], params["norm.bias"])


def pool_batch(x: Tensor, keep: np.ndarray | None = None, mode: str = "mean") -> Tensor:
    """(B, S, D) -> (B, D).  ``mean`` averages CLS and every kept patch token."""
    if mode == "cls":
        return x[:, 0, :]
    if mode != "mean":
        raise ValueError(f"unknown pooling mode {mode!r}")
    if keep is None:
        return x.mean(axis=1)
    w = keep.astype(np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    return nc.matmul(nc.Tensor(w[:, None, :]), x).reshape(x.shape[0], x.shape[2])


def forward_plain(images: np.ndarray, params: dict[str, Tensor], cfg: VitConfig, pooling: str = "mean"):
    """Reference L-block forward with no taps and no pruning."""
    x = embed_batch(images, params, cfg)
    for i in range(cfg.num_blocks):
        x, _ = block_forward(x, params, cfg, i)
    x = final_norm(x, params)
    return x, pool_batch(x, None, pooling)


# ---------------------------------------------------------------------------
# single-image view
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    tokens: Tensor  # (S, D), row 0 is CLS
    grid_height: int
    grid_width: int
    original_index: np.ndarray = field(default=None)  # grid position of each patch row
    cls_at_zero: bool = True

    def __post_init__(self):
        if self.original_index is None:
            self.original_index = np.arange(self.tokens.shape[0] - 1)
        self.original_index = np.asarray(self.original_index, dtype=np.int64)
        n = self.grid_height * self.grid_width
        if len(self.original_index) != self.tokens.shape[0] - 1:
            raise ValueError("original_index must cover every patch token")
        if len(np.unique(self.original_index)) != len(self.original_index):
            raise ValueError("original_index entries must be unique")
        if len(self.original_index) and (self.original_index.min() < 0 or self.original_index.max() >= n):
            raise ValueError("original_index out of grid range")

    def __len__(self):
        return self.tokens.shape[0]

    def select(self, patch_positions) -> "TokenSequence":
        """Keep CLS and the patch tokens at the given positions (indices into this sequence)."""
        patch_positions = np.asarray(patch_positions, dtype=np.int64)
        rows = np.concatenate([[0], patch_positions + 1])
        return TokenSequence(
            self.tokens[rows],
            self.grid_height,
            self.grid_width,
            self.original_index[patch_positions],
        )


def patchify(image: np.ndarray, params: dict[str, Tensor], cfg: VitConfig) -> TokenSequence:
    tokens = embed_batch(image, params, cfg)
    return TokenSequence(tokens[0], cfg.grid_side, cfg.grid_side)


def run_block(
    seq: TokenSequence, params: dict[str, Tensor], cfg: VitConfig, i: int
) -> tuple[TokenSequence, np.ndarray]:
    s, d = seq.tokens.shape
    out, attn = block_forward(seq.tokens.reshape(1, s, d), params, cfg, i)
    return (
        TokenSequence(out[0], seq.grid_height, seq.grid_width, seq.original_index),
        attn[0],
    )


def pool_output(seq: TokenSequence, mode: str = "mean") -> Tensor:
    """(1, D) image feature from a sequence; ``cls`` mode keeps only row 0."""
    if len(seq) == 0:
        raise ValueError("cannot pool an empty sequence")
    if mode == "cls":
        return seq.tokens[0:1]
    return seq.tokens.mean(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Little-endian flat file: header, then (name, rows, cols, float64 data) records."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value[None, :]
        if value.ndim != 2:
            raise ValueError(f"tensor {name} must be 1-D or 2-D, got {value.shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", *value.shape))
        chunks.append(value.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an AFCK checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode("utf-8")
        off += n
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        size = rows * cols * 8
        out[name] = np.frombuffer(data[off : off + size], dtype="<f8").reshape(rows, cols).copy()
        off += size
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out
