"""Light decoder: per-tap projection and resampling, channel concat, MLP head.

Only :class:`DecoderParams` is trainable. Forward functions return the
intermediates the trainer needs for its hand-written backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from segdino import tensor as T
from segdino.encoder import EncoderConfig, EncoderParams, forward_collect
from segdino.errors import ConfigError, ShapeError
from segdino.prng import stream, trunc_normal

LOSS_RESOLUTIONS = ("token", "pixel")


@dataclass(frozen=True)
class DecoderConfig:
    common_channels: int = 64
    tap_count: int = 4
    hidden_dim: int | None = None  # None -> tap_count * common_channels
    n_class: int = 2
    common_grid: tuple[int, int] | None = None  # None -> encoder token grid
    loss_resolution: str = "token"

    def __post_init__(self):
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", self.tap_count * self.common_channels)
        if self.common_grid is not None:
            object.__setattr__(self, "common_grid", tuple(int(v) for v in self.common_grid))
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> list[str]:
        out = []
        if self.tap_count < 1:
            out.append(f"decoder.tap_count must be >= 1 (got {self.tap_count})")
        if self.common_channels < 1:
            out.append(f"decoder.common_channels must be >= 1 (got {self.common_channels})")
        if self.hidden_dim < 1:
            out.append(f"decoder.hidden_dim must be >= 1 (got {self.hidden_dim})")
        if self.n_class < 2:
            out.append(f"decoder.n_class must be >= 2 (got {self.n_class})")
        if self.common_grid is not None and (len(self.common_grid) != 2 or min(self.common_grid) < 1):
            out.append(f"decoder.common_grid must be two positive extents (got {self.common_grid})")
        if self.loss_resolution not in LOSS_RESOLUTIONS:
            out.append(f"decoder.loss_resolution must be one of {LOSS_RESOLUTIONS} (got {self.loss_resolution!r})")
        return out

    def grid_for(self, enc: EncoderConfig) -> tuple[int, int]:
        return self.common_grid if self.common_grid is not None else enc.grid


def param_names(tap_count: int) -> list[str]:
    names = []
    for k in range(tap_count):
        names += [f"proj{k}_w", f"proj{k}_b"]
    return names + ["head_w1", "head_b1", "head_w2", "head_b2"]


def param_shapes(cfg: DecoderConfig, embed_dim: int) -> dict[str, tuple[int, ...]]:
    c, hid, k = cfg.common_channels, cfg.hidden_dim, cfg.tap_count
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(k):
        shapes[f"proj{i}_w"] = (embed_dim, c)
        shapes[f"proj{i}_b"] = (c,)
    shapes["head_w1"] = (k * c, hid)
    shapes["head_b1"] = (hid,)
    shapes["head_w2"] = (hid, cfg.n_class)
    shapes["head_b2"] = (cfg.n_class,)
    return shapes


def trainable_param_count(cfg: DecoderConfig, embed_dim: int) -> int:
    """``K(dC + C) + KC*hidden + hidden + hidden*n_class + n_class``."""
    k, c, h, n = cfg.tap_count, cfg.common_channels, cfg.hidden_dim, cfg.n_class
    return k * (embed_dim * c + c) + k * c * h + h + h * n + n


class DecoderParams:
    """Mutable container of named decoder arrays (fixed order)."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = dict(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def tap_count(self) -> int:
        return sum(1 for n in self.arrays if n.endswith("_w") and n.startswith("proj"))

    @property
    def dtype(self) -> np.dtype:
        return self.arrays["head_w1"].dtype

    def proj(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.arrays[f"proj{k}_w"], self.arrays[f"proj{k}_b"]

    def copy(self) -> "DecoderParams":
        return DecoderParams({k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "DecoderParams":
        dt = T.resolve_dtype(dtype)
        return DecoderParams({k: v.astype(dt) for k, v in self.arrays.items()})

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def zeros_like(self) -> "DecoderParams":
        return DecoderParams({k: np.zeros_like(v) for k, v in self.arrays.items()})


def init_params(cfg: DecoderConfig, embed_dim: int, seed: int, dtype="f32") -> DecoderParams:
    """Truncated-normal(0.02) weights and zero biases on the ``"decoder"`` streams."""
    dt = T.resolve_dtype(dtype)
    arrays = {}
    for name, shape in param_shapes(cfg, embed_dim).items():
        if name.endswith("_w") or name.endswith(("_w1", "_w2")):
            arr = trunc_normal(stream(seed, "decoder", name), shape, std=0.02)
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dt)
    return DecoderParams(arrays)


def reassemble(
    z: np.ndarray,
    proj_w: np.ndarray,
    proj_b: np.ndarray,
    encoder_grid: tuple[int, int],
    common_grid: tuple[int, int],
) -> np.ndarray:
    """Project tokens ``[N, d] -> [N, C]`` and resample the grid to ``common_grid``.

    Accepts a leading batch axis (``[B, N, d]``).
    """
    h, w = encoder_grid
    hc, wc = common_grid
    if z.shape[-2] != h * w:
        raise ShapeError(f"{z.shape[-2]} tokens do not form a {h}x{w} grid")
    projected = T.linear(z, proj_w, proj_b)
    if (h, w) == (hc, wc):
        return projected
    c = projected.shape[-1]
    lead = projected.shape[:-2]
    grid = projected.reshape(*lead, h, w, c)
    return T.bilinear_resize(grid, hc, wc).reshape(*lead, hc * wc, c)


def fuse(z_tilde: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate per-tap features along channels, tap ``k`` in columns ``[kC, (k+1)C)``."""
    if not z_tilde:
        raise ShapeError("fuse needs at least one tap")
    first = z_tilde[0].shape
    for i, z in enumerate(z_tilde):
        if z.shape != first:
            raise ShapeError(f"tap {i} has shape {z.shape}, expected {first}")
    return np.concatenate(list(z_tilde), axis=-1)


def mlp_head(h: np.ndarray, params: DecoderParams, return_hidden: bool = False):
    """Linear -> GELU -> linear. Returns raw logits ``[N_c, n_class]``."""
    w1 = params["head_w1"]
    if h.shape[-1] != w1.shape[0]:
        raise ShapeError(f"fused width {h.shape[-1]} does not match head input width {w1.shape[0]}")
    pre = T.linear(h, w1, params["head_b1"])
    act = T.gelu(pre)
    logits = T.linear(act, params["head_w2"], params["head_b2"])
    if return_hidden:
        return logits, pre, act
    return logits


def upsample_logits(y_hat: np.ndarray, common_grid: tuple[int, int], out: tuple[int, int]) -> np.ndarray:
    """Token logits ``[..., N_c, n]`` to a pixel grid ``[..., H, W, n]``."""
    hc, wc = common_grid
    if y_hat.shape[-2] != hc * wc:
        raise ShapeError(f"{y_hat.shape[-2]} logit rows do not form a {hc}x{wc} grid")
    lead = y_hat.shape[:-2]
    grid = y_hat.reshape(*lead, hc, wc, y_hat.shape[-1])
    return T.bilinear_resize(grid, out[0], out[1])


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ``np.argmax`` returns the first maximum, i.e. lowest class on ties."""
    return np.argmax(logits, axis=-1).astype(np.int64)


def logits_to_mask(y_hat: np.ndarray, common_grid: tuple[int, int], out: tuple[int, int]):
    """Upsample logits bilinearly to ``out`` and take the argmax."""
    from segdino.metrics import Mask

    return Mask(argmax_labels(upsample_logits(y_hat, common_grid, out)))


@dataclass
class DecoderTrace:
    """Intermediates of one decoder forward pass (batched or single)."""

    taps: list[np.ndarray]
    fused: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    logits: np.ndarray


def decode(
    taps: Sequence[np.ndarray],
    params: DecoderParams,
    encoder_grid: tuple[int, int],
    common_grid: tuple[int, int],
) -> DecoderTrace:
    """Decoder forward from precomputed tap features (``[N, d]`` or ``[B, N, d]`` each)."""
    if len(taps) != params.tap_count:
        raise ShapeError(f"got {len(taps)} tap features for a decoder with {params.tap_count} taps")
    z_tilde = [reassemble(z, *params.proj(k), encoder_grid, common_grid) for k, z in enumerate(taps)]
    fused = fuse(z_tilde)
    logits, pre, act = mlp_head(fused, params, return_hidden=True)
    return DecoderTrace(list(taps), fused, pre, act, logits)


def forward(
    image: np.ndarray,
    encoder: EncoderParams,
    params: DecoderParams,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    probe: dict | None = None,
):
    """Image to ``(logits [N_c, n_class], Mask[H, W])``.

    If ``probe`` is a dict it is filled with the tap features, the fused
    matrix and the head logits.
    """
    if dec_cfg.tap_count != len(enc_cfg.tap_layers):
        raise ConfigError(
            f"decoder.tap_count={dec_cfg.tap_count} must equal the number of encoder.tap_layers ({len(enc_cfg.tap_layers)})"
        )
    taps = forward_collect(image, encoder, enc_cfg)
    taps = [t.astype(params.dtype, copy=False) for t in taps]
    grid = dec_cfg.grid_for(enc_cfg)
    trace = decode(taps, params, enc_cfg.grid, grid)
    if probe is not None:
        probe.update(taps=trace.taps, fused=trace.fused, logits=trace.logits)
    mask = logits_to_mask(trace.logits, grid, (enc_cfg.image_h, enc_cfg.image_w))
    return trace.logits, mask
