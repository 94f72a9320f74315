"""Synthetic shapes dataset, Netpbm file IO and preprocessing."""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from segdino import tensor as T
from segdino.errors import ConfigError, FormatError, ShapeError
from segdino.metrics import Mask
from segdino.prng import stream

DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

SHAPE_KINDS = ("disk", "rectangle", "annulus")
TEXTURES = ("flat", "gradient", "checker")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    mask: Mask
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"sample {self.id}: image must be [H, W, 3], got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ShapeError(f"sample {self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 200
    size: int = 64
    shapes: tuple[str, ...] = ("disk", "rectangle")
    noise_std: float = 0.03
    texture: str = "gradient"
    seed: int = 0
    min_shapes: int = 1
    max_shapes: int = 3
    min_extent: float = 0.18  # shape radius range, as a fraction of the canvas
    max_extent: float = 0.32

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self, patch_size: int | None = None) -> list[str]:
        out = []
        if self.n_samples < 1:
            out.append(f"data.n_samples must be >= 1 (got {self.n_samples})")
        if self.size < 4:
            out.append(f"data.size must be >= 4 (got {self.size})")
        if patch_size and self.size % patch_size:
            out.append(f"data.size={self.size} must be divisible by encoder.patch_size={patch_size}")
        if not self.shapes or any(s not in SHAPE_KINDS for s in self.shapes):
            out.append(f"data.shapes must be a non-empty subset of {SHAPE_KINDS} (got {self.shapes})")
        if self.texture not in TEXTURES:
            out.append(f"data.texture must be one of {TEXTURES} (got {self.texture!r})")
        if self.noise_std < 0:
            out.append(f"data.noise_std must be >= 0 (got {self.noise_std})")
        if not 1 <= self.min_shapes <= self.max_shapes:
            out.append("data.min_shapes/max_shapes must satisfy 1 <= min <= max")
        if not 0 < self.min_extent <= self.max_extent <= 0.5:
            out.append("data.min_extent/max_extent must satisfy 0 < min <= max <= 0.5")
        return out


# --------------------------------------------------------------------------- rasterisation


def _centres(size: int):
    c = np.arange(size) + 0.5
    return c[:, None], c[None, :]


def disk_mask(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Pixels whose centre lies within distance ``r`` of ``(cy, cx)``."""
    yy, xx = _centres(size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def annulus_mask(size: int, cy: float, cx: float, r_out: float, r_in: float) -> np.ndarray:
    yy, xx = _centres(size)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r_out * r_out) & (d2 > r_in * r_in)


def rect_mask(size: int, cy: float, cx: float, half_h: float, half_w: float) -> np.ndarray:
    yy, xx = _centres(size)
    return (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)


def _background(rng: np.random.Generator, size: int, texture: str) -> np.ndarray:
    base = rng.uniform(0.1, 0.45, size=3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    if texture == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = _centres(size)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
        img += 0.15 * (ramp - ramp.mean())[..., None]
    elif texture == "checker":
        cell = max(2, size // 8)
        yy, xx = np.mgrid[0:size, 0:size]
        sign = np.where(((yy // cell) + (xx // cell)) % 2 == 0, 1.0, -1.0)
        img += 0.06 * sign[..., None]
    return img


def _draw_shape(rng: np.random.Generator, kind: str, size: int, extent: tuple[float, float]):
    """One shape: (mask, centre, radius)."""
    r = rng.uniform(*extent) * size
    cy, cx = rng.uniform(r * 0.6, size - r * 0.6, size=2)
    if kind == "disk":
        m = disk_mask(size, cy, cx, r)
    elif kind == "annulus":
        m = annulus_mask(size, cy, cx, r * 1.2, r * 0.55)
    else:
        hh, hw = rng.uniform(0.8, 1.0, size=2) * r
        m = rect_mask(size, cy, cx, hh, hw)
    return m, (cy, cx), r


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    """Sample ``index`` of the dataset; depends only on ``(cfg, index)``."""
    rng = stream(cfg.seed, "synth", index)
    size = cfg.size
    img = _background(rng, size, cfg.texture)
    mask = np.zeros((size, size), dtype=bool)
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    yy, xx = _centres(size)
    for _ in range(n_shapes):
        kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        m, (cy, cx), r = _draw_shape(rng, kind, size, (cfg.min_extent, cfg.max_extent))
        colour = rng.uniform(0.6, 0.95, size=3)
        # brighter centre, darker rim
        falloff = np.clip(np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / (1.5 * r), 0, 1)
        shade = colour[None, None, :] * (1.0 - 0.25 * falloff[..., None])
        img = np.where(m[..., None], shade, img)
        mask |= m
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Sample(img, Mask(mask.astype(np.int64)), f"s{index:05d}")


def synth_generate(cfg: SynthConfig) -> list[Sample]:
    return [synth_sample(cfg, i) for i in range(cfg.n_samples)]


# --------------------------------------------------------------------------- preprocessing


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an ``[H, W, C]`` image."""
    return T.bilinear_resize(image, out_h, out_w)


def resize_mask(mask, out_h: int, out_w: int) -> Mask:
    """Nearest-neighbour resize; never creates new labels."""
    labels = mask.labels if isinstance(mask, Mask) else np.asarray(mask)
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return Mask(labels[rows][:, cols])


def normalize(image: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    """Per-channel ``(x - mean) / std``."""
    mean = np.asarray(mean, dtype=image.dtype)
    std = np.asarray(std, dtype=image.dtype)
    return (image - mean) / std


def denormalize(image: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=image.dtype)
    std = np.asarray(std, dtype=image.dtype)
    return image * std + mean


# --------------------------------------------------------------------------- netpbm

_TOKEN = re.compile(rb"\S+")


def _parse_header(buf: bytes, magic: bytes):
    """Return ``(width, height, maxval, payload_offset)``."""
    if not buf.startswith(magic):
        raise FormatError(f"expected magic {magic.decode()}, found {buf[:2]!r}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                nl = buf.find(b"\n", pos)
                pos = len(buf) if nl < 0 else nl + 1
            else:
                pos += 1
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated header", offset=pos)
        tok = m.group()
        if b"#" in tok:
            tok = tok.split(b"#", 1)[0]
        if not tok.isdigit():
            raise FormatError(f"header field {tok!r} is not a decimal integer", offset=pos)
        fields.append(int(tok))
        pos += len(tok)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", offset=pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"image extents must be positive, got {w}x{h}", offset=2)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit maxval (1..255) is supported, got {maxval}", offset=pos - 1)
    return w, h, maxval, pos


def _payload(buf: bytes, offset: int, n: int) -> np.ndarray:
    if len(buf) - offset < n:
        raise FormatError(f"payload has {len(buf) - offset} bytes, expected {n}", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset)


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, maxval, off = _parse_header(buf, b"P6")
    raw = _payload(buf, off, w * h * 3)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM needs an [H, W, 3] image, got {img.shape}")
    h, w, _ = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()


def decode_pgm_mask(buf: bytes) -> Mask:
    w, h, _, off = _parse_header(buf, b"P5")
    raw = _payload(buf, off, w * h).reshape(h, w).astype(np.int64)
    if np.all((raw == 0) | (raw == 255)):
        raw = raw // 255
    return Mask(raw)


def encode_pgm_mask(mask) -> bytes:
    labels = mask.labels if isinstance(mask, Mask) else np.asarray(mask)
    h, w = labels.shape
    if labels.max(initial=0) <= 1:
        out = labels * 255
    elif labels.max() < 255:
        out = labels
    else:
        raise ShapeError("labels above 254 cannot be stored in an 8-bit PGM")
    return f"P5\n{w} {h}\n255\n".encode() + out.astype(np.uint8).tobytes()


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_image(image: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_ppm(image))


def load_mask(path) -> Mask:
    return decode_pgm_mask(Path(path).read_bytes())


def save_mask(mask, path) -> None:
    Path(path).write_bytes(encode_pgm_mask(mask))


# --------------------------------------------------------------------------- split & manifest


def split_bucket(sample_id: str, seed: int) -> float:
    """Uniform value in [0, 1) from a hash of ``(seed, id)``."""
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def split(samples: Sequence, seed: int, train_fraction: float = 0.8):
    """Deterministic train/test partition by hashed id."""
    train, test = [], []
    for s in samples:
        (train if split_bucket(s.id, seed) < train_fraction else test).append(s)
    return train, test


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """Write ``images/<id>.ppm``, ``masks/<id>.pgm`` and ``manifest.tsv``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_rel = f"images/{s.id}.ppm"
        mask_rel = f"masks/{s.id}.pgm"
        save_image(s.image, out / img_rel)
        save_mask(s.mask, out / mask_rel)
        lines.append(f"{s.id}\t{img_rel}\t{mask_rel}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> list[tuple[str, Path, Path]]:
    path = Path(path)
    base = path.parent
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{n}: expected id<TAB>image<TAB>mask, got {len(parts)} fields")
        sid, img, msk = parts
        rows.append((sid, base / img if not os.path.isabs(img) else Path(img), base / msk if not os.path.isabs(msk) else Path(msk)))
    return rows


def load_dataset(manifest) -> list[Sample]:
    return [Sample(load_image(img), load_mask(msk), sid) for sid, img, msk in read_manifest(manifest)]
