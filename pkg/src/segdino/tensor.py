"""Dense tensor math used by the encoder, decoder and trainer.

Tensors are plain ``numpy.ndarray`` values of dtype float32 or float64.
Every function here is pure: inputs are never modified and the same
inputs always give bitwise-identical outputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from segdino.errors import DimensionError, NumericError, ParameterError, ShapeError

F32 = np.float32
F64 = np.float64
DTYPES = {"f32": F32, "f64": F64}

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ParameterError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(F32), np.dtype(F64)):
        raise ParameterError(f"unsupported dtype {dt}; tensors are f32 or f64")
    return dt


def tensor(data, dtype="f64") -> np.ndarray:
    """Build a contiguous tensor, rejecting zero extents and foreign dtypes."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=resolve_dtype(dtype)))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor extents must all be >= 1, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a[m, k]`` and ``b[k, n]``.

    Leading batch axes on ``a`` are allowed (they are treated as extra rows).
    """
    if b.ndim != 2 or a.ndim < 2:
        raise DimensionError(f"matmul expects a[..., m, k] and b[k, n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias
    return out


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalise over the last axis (population variance), then scale and shift."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + x.dtype.type(eps)) * gamma + beta


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def softmax(x: np.ndarray) -> np.ndarray:
    """Last-axis softmax with max subtraction."""
    _check_finite(x, "softmax")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    _check_finite(x, "log_softmax")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    return x * (0.5 * (1.0 + erf(x * _SQRT_HALF))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of :func:`gelu`: ``Phi(x) + x * phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (cdf + x * pdf).astype(x.dtype, copy=False)


def resize_matrix(in_size: int, out_size: int, dtype="f64") -> np.ndarray:
    """1-D linear interpolation weights ``[out_size, in_size]``.

    Half-pixel centres (align_corners=False): output sample ``i`` reads the
    input at ``(i + 0.5) * in/out - 0.5``, clamped to ``[0, in - 1]``.
    """
    if in_size < 1 or out_size < 1:
        raise ParameterError(f"resize sizes must be >= 1, got {in_size} -> {out_size}")
    w = np.zeros((out_size, in_size), dtype=F64)
    if in_size == out_size:
        np.fill_diagonal(w, 1.0)
        return w.astype(resolve_dtype(dtype))
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    return w.astype(resolve_dtype(dtype))


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``x[..., h, w, c]`` to ``[..., out_h, out_w, c]``.

    Separable bilinear interpolation; channels are independent. At identity
    size the input is returned unchanged (as a copy).
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be >= 1, got ({out_h}, {out_w})")
    if x.ndim < 3:
        raise ShapeError(f"bilinear_resize expects [..., h, w, c], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = resize_matrix(h, out_h, x.dtype)
    rw = resize_matrix(w, out_w, x.dtype)
    # rows first, then columns
    tmp = np.einsum("ih,...hwc->...iwc", rh, x)
    return np.einsum("jw,...iwc->...ijc", rw, tmp)


def bilinear_resize_adjoint(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of :func:`bilinear_resize` applied to an output-space gradient."""
    out_h, out_w = g.shape[-3], g.shape[-2]
    if (in_h, in_w) == (out_h, out_w):
        return g.copy()
    rh = resize_matrix(in_h, out_h, g.dtype)
    rw = resize_matrix(in_w, out_w, g.dtype)
    tmp = np.einsum("ih,...ijc->...hjc", rh, g)
    return np.einsum("jw,...hjc->...hwc", rw, tmp)
