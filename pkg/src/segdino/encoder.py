"""Frozen ViT backbone that returns patch tokens from selected blocks.

Weights come from a seeded initialiser (no pretrained import), but the
computation is a standard pre-LN ViT: patchify, linear patch embedding,
register tokens prepended, learned positional embeddings added, then
``depth`` transformer blocks. After every block listed in ``tap_layers``
the patch-token rows are copied out; register rows are dropped.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from segdino import tensor as T
from segdino.errors import ConfigError, ShapeError
from segdino.prng import stream, trunc_normal

LN_EPS = 1e-6

BLOCK_KEYS = (
    "ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b",
    "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
)


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 64
    image_w: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    tap_layers: tuple[int, ...] = (1, 2, 3, 4)
    n_register_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> list[str]:
        out = []
        p = self.patch_size
        if p < 1:
            out.append(f"encoder.patch_size must be >= 1 (got {p})")
        elif self.image_h % p or self.image_w % p or self.image_h < 1 or self.image_w < 1:
            out.append(
                f"image size {self.image_h}x{self.image_w} must be divisible by encoder.patch_size={p}"
                " (image_h mod p == 0 and image_w mod p == 0)"
            )
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            out.append(f"encoder.embed_dim={self.embed_dim} must be divisible by encoder.heads={self.heads}")
        if self.depth < 1:
            out.append(f"encoder.depth must be >= 1 (got {self.depth})")
        taps = self.tap_layers
        if not taps:
            out.append("encoder.tap_layers must not be empty")
        elif any(b <= a for a, b in zip(taps, taps[1:])):
            out.append(f"encoder.tap_layers must be strictly increasing (got {list(taps)})")
        elif taps[0] < 1 or taps[-1] > self.depth:
            out.append(f"encoder.tap_layers must lie in [1, {self.depth}] (got {list(taps)})")
        if self.n_register_tokens < 0:
            out.append("encoder.n_register_tokens must be >= 0")
        if self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            out.append(f"encoder.mlp_ratio must give a positive hidden width (got {self.mlp_ratio})")
        return out

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


def patch_count(config: EncoderConfig) -> int:
    """Number of patch tokens, ``(H/p) * (W/p)``."""
    gh, gw = config.grid
    return gh * gw


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """Cut ``image[H, W, c]`` into ``[N, p*p*c]`` rows.

    Patches are ordered row-major over the patch grid. Within a patch,
    pixels go row-major with the channel index varying fastest.
    """
    if image.ndim != 3:
        raise ShapeError(f"patchify expects [H, W, C], got {image.shape}")
    h, w, c = image.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = image.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * gw, p * p * c))


def depatchify(patches: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    gh, gw = h // p, w // p
    n, width = patches.shape
    if n != gh * gw or width % (p * p):
        raise ShapeError(f"patch matrix {patches.shape} does not tile a {h}x{w} image with p={p}")
    c = width // (p * p)
    x = patches.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(h, w, c))


@dataclass(frozen=True)
class EncoderParams:
    """Read-only encoder weights, keyed by name in a fixed order."""

    arrays: Mapping[str, np.ndarray]
    depth: int = field(default=0)

    def __post_init__(self):
        frozen = {}
        for name, arr in self.arrays.items():
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "arrays", MappingProxyType(frozen))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def dtype(self) -> np.dtype:
        return self.arrays["patch_w"].dtype

    def block(self, i: int) -> dict[str, np.ndarray]:
        """Parameters of block ``i`` (0-based) under their short names."""
        return {k: self.arrays[f"block{i}.{k}"] for k in BLOCK_KEYS}

    def astype(self, dtype) -> "EncoderParams":
        dt = T.resolve_dtype(dtype)
        return EncoderParams({k: v.astype(dt) for k, v in self.arrays.items()}, self.depth)

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays.items():
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(str(arr.dtype).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every encoder tensor, in checkpoint order."""
    d, p, r = config.embed_dim, config.patch_size, config.n_register_tokens
    hid = config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_w": (p * p * 3, d),
        "patch_b": (d,),
        "pos_embed": (patch_count(config) + r, d),
    }
    if r:
        shapes["register_tokens"] = (r, d)
    for i in range(config.depth):
        block = {
            "ln1_g": (d,), "ln1_b": (d,),
            "qkv_w": (d, 3 * d), "qkv_b": (3 * d,),
            "proj_w": (d, d), "proj_b": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "fc1_w": (d, hid), "fc1_b": (hid,),
            "fc2_w": (hid, d), "fc2_b": (d,),
        }
        shapes.update({f"block{i}.{k}": block[k] for k in BLOCK_KEYS})
    shapes["norm_g"] = (d,)
    shapes["norm_b"] = (d,)
    return shapes


def frozen_param_count(config: EncoderConfig) -> int:
    """Closed-form encoder parameter count."""
    d, p, r, L = config.embed_dim, config.patch_size, config.n_register_tokens, config.depth
    hid = config.mlp_hidden
    per_block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hid + hid) + (hid * d + d)
    return (p * p * 3 * d + d) + (patch_count(config) + r) * d + r * d + L * per_block + 2 * d


def init_frozen(config: EncoderConfig, dtype="f32") -> EncoderParams:
    """Seeded stand-in weights.

    Each tensor draws from its own PCG64 stream keyed by
    ``(config.seed, "encoder", name)``. Weights and embeddings are
    truncated normal (std 0.02, cut at two sigma), biases zero, LayerNorm
    scales one.
    """
    dt = T.resolve_dtype(dtype)
    arrays = {}
    for name, shape in param_shapes(config).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            arr = np.ones(shape)
        elif short.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = trunc_normal(stream(config.seed, "encoder", name), shape, std=0.02)
        arrays[name] = arr.astype(dt)
    return EncoderParams(arrays, config.depth)


AttentionHook = Callable[[np.ndarray], None]


def attention(z: np.ndarray, bp: Mapping[str, np.ndarray], heads: int, hook: AttentionHook | None = None) -> np.ndarray:
    t, d = z.shape
    hd = d // heads
    qkv = T.linear(z, bp["qkv_w"], bp["qkv_b"])
    q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(t, heads, hd).transpose(1, 0, 2) for i in range(3))
    scores = (q @ k.transpose(0, 2, 1)) * z.dtype.type(1.0 / math.sqrt(hd))
    weights = T.softmax(scores)
    if hook is not None:
        hook(weights)
    mixed = (weights @ v).transpose(1, 0, 2).reshape(t, d)
    return T.linear(mixed, bp["proj_w"], bp["proj_b"])


def transformer_block(
    z: np.ndarray, bp: Mapping[str, np.ndarray], heads: int, hook: AttentionHook | None = None
) -> np.ndarray:
    """Pre-LN block: ``z + MHSA(LN1(z))`` followed by ``+ MLP(LN2(.))``.

    ``hook`` receives the attention weights ``[heads, T, T]`` if given.
    """
    if z.ndim != 2 or z.shape[1] != bp["ln1_g"].shape[0]:
        raise ShapeError(f"token matrix {z.shape} does not match block width {bp['ln1_g'].shape[0]}")
    z = z + attention(T.layer_norm(z, bp["ln1_g"], bp["ln1_b"], LN_EPS), bp, heads, hook)
    hidden = T.gelu(T.linear(T.layer_norm(z, bp["ln2_g"], bp["ln2_b"], LN_EPS), bp["fc1_w"], bp["fc1_b"]))
    return z + T.linear(hidden, bp["fc2_w"], bp["fc2_b"])


def embed(image: np.ndarray, params: EncoderParams, config: EncoderConfig) -> np.ndarray:
    """Initial token matrix: registers first, then patch tokens, plus positions."""
    tokens = T.linear(patchify(image, config.patch_size), params["patch_w"], params["patch_b"])
    if config.n_register_tokens:
        tokens = np.concatenate([params["register_tokens"], tokens], axis=0)
    return tokens + params["pos_embed"]


def forward_collect(
    image: np.ndarray,
    params: EncoderParams,
    config: EncoderConfig,
    hook: AttentionHook | None = None,
) -> list[np.ndarray]:
    """Patch tokens ``[N, d]`` after each tap layer, in tap order."""
    if image.shape != (config.image_h, config.image_w, 3):
        raise ShapeError(
            f"image shape {image.shape} does not match encoder input ({config.image_h}, {config.image_w}, 3)"
        )
    image = np.asarray(image, dtype=params.dtype)
    r = config.n_register_tokens
    taps = set(config.tap_layers)
    z = embed(image, params, config)
    collected = []
    for layer in range(1, config.depth + 1):
        z = transformer_block(z, params.block(layer - 1), config.heads, hook)
        if layer in taps:
            collected.append(z[r:].copy())
        if layer == config.tap_layers[-1]:
            # later blocks cannot change any collected snapshot
            break
    return collected
