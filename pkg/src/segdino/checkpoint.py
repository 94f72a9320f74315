"""The "SGDW" flat binary weight container.

Layout, all integers little-endian::

    b"SGDW"                      magic
    u32 version                  currently 1
    u32 n_sections
    per section:
        u32 len, utf-8 name      e.g. "encoder", "decoder"
        u32 n_arrays
        per array (fixed parameter order of the section):
            u32 len, utf-8 name
            u32 ndim, u32 * ndim extents
            u32 count            number of float32 values (product of extents)
            f32 * count          row-major data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from segdino.errors import CheckpointError, FormatError

MAGIC = b"SGDW"
VERSION = 1


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(sections: Mapping[str, Mapping[str, np.ndarray]]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for sname, arrays in sections.items():
        out.append(_str(sname))
        out.append(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            out.append(_str(name))
            out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            out.append(struct.pack("<I", a.size))
            out.append(a.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated: wanted {n} bytes, {len(self.buf) - self.pos} left", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        at = self.pos
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid utf-8", offset=at) from None


def decode(buf: bytes) -> dict[str, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not an SGDW checkpoint (bad magic)", offset=0)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported SGDW version {version}", offset=4)
    sections = {}
    for _ in range(r.u32()):
        sname = r.string()
        arrays = {}
        for _ in range(r.u32()):
            name = r.string()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            at = r.pos
            count = r.u32()
            if count != int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"{sname}/{name}: count {count} does not match shape {shape}", offset=at)
            arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        sections[sname] = arrays
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last section", offset=r.pos)
    return sections


def save(path, sections: Mapping[str, Mapping[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(sections))


def load(path) -> dict[str, dict[str, np.ndarray]]:
    try:
        return decode(Path(path).read_bytes())
    except FormatError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def check_shapes(section: str, arrays: Mapping[str, np.ndarray], expected: Mapping[str, tuple]) -> None:
    """Raise :class:`CheckpointError` unless names, order and shapes match exactly."""
    if list(arrays) != list(expected):
        missing = [n for n in expected if n not in arrays]
        extra = [n for n in arrays if n not in expected]
        raise CheckpointError(f"section {section!r} does not match the config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(f"{section}/{name}: checkpoint shape {arrays[name].shape}, config expects {tuple(shape)}")
