"""Decoder-only training: cross-entropy, manual backprop, AdamW.

The encoder is a fixed feature source. Tap features are computed once per
sample and cached; nothing in this module writes encoder weights, and the
training loop checks the encoder checksum after every epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from segdino import tensor as T
from segdino.decoder import (
    DecoderConfig,
    DecoderParams,
    DecoderTrace,
    decode,
    init_params,
    upsample_logits,
)
from segdino.encoder import EncoderConfig, EncoderParams, forward_collect, init_frozen
from segdino.errors import ConfigError, DataError, NumericError, SegDinoError, ShapeError
from segdino.metrics import Mask
from segdino.prng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    loss_resolution: str = "token"
    class_weighting: str = "none"  # or "inverse_frequency"
    dtype: str = "f32"

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> list[str]:
        out = []
        if not self.learning_rate > 0:
            out.append(f"train.learning_rate must be > 0 (got {self.learning_rate})")
        if self.weight_decay < 0:
            out.append(f"train.weight_decay must be >= 0 (got {self.weight_decay})")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                out.append(f"train.{name} must satisfy 0 <= {name} < 1 (got {b})")
        if not self.eps_adam > 0:
            out.append(f"train.eps_adam must be > 0 (got {self.eps_adam})")
        if self.batch_size < 1:
            out.append(f"train.batch_size must be >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            out.append(f"train.epochs must be >= 0 (got {self.epochs})")
        if self.loss_resolution not in ("token", "pixel"):
            out.append(f"train.loss_resolution must be 'token' or 'pixel' (got {self.loss_resolution!r})")
        if self.class_weighting not in ("none", "inverse_frequency"):
            out.append(f"train.class_weighting must be 'none' or 'inverse_frequency' (got {self.class_weighting!r})")
        if self.dtype not in T.DTYPES:
            out.append(f"train.dtype must be one of {sorted(T.DTYPES)} (got {self.dtype!r})")
        return out


# --------------------------------------------------------------------------- loss


def cross_entropy(
    logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``.

    ``logits`` is ``[M, n_class]``; ``labels`` has ``M`` entries. Without
    weights the gradient is ``(softmax - onehot) / M``. With per-class
    weights the mean is weighted: ``sum(w_y * nll) / sum(w_y)``.
    """
    logits = np.asarray(logits)
    m, n = logits.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.size != m:
        raise ShapeError(f"{labels.size} labels for {m} logit rows")
    bad = np.flatnonzero((labels < 0) | (labels >= n))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} at index {i} is outside [0, {n})", index=i)
    logp = T.log_softmax(logits)
    rows = np.arange(m)
    nll = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    if class_weights is None:
        loss = float(nll.sum(dtype=np.float64) / m)
        grad /= m
    else:
        w = np.asarray(class_weights, dtype=logits.dtype)[labels]
        total = w.sum(dtype=np.float64)
        loss = float((w * nll).sum(dtype=np.float64) / total)
        grad *= (w / logits.dtype.type(total))[:, None]
    return loss, grad


def pool_labels(mask, common_grid: tuple[int, int]) -> np.ndarray:
    """Majority label per cell of a ``common_grid`` partition; ties go to the lower class."""
    labels = mask.labels if isinstance(mask, Mask) else np.asarray(mask)
    h, w = labels.shape
    hc, wc = common_grid
    if h % hc or w % wc:
        raise ShapeError(f"mask {h}x{w} does not divide into a {hc}x{wc} grid")
    ch, cw = h // hc, w // wc
    cells = labels.reshape(hc, ch, wc, cw).transpose(0, 2, 1, 3).reshape(hc * wc, ch * cw)
    n = int(labels.max()) + 1
    counts = np.stack([(cells == k).sum(axis=1) for k in range(n)], axis=1)
    return np.argmax(counts, axis=1).astype(np.int64)


def inverse_frequency_weights(labels: np.ndarray, n_class: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels).ravel(), minlength=n_class).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    w = counts.sum() / (n_class * counts)
    return w


# --------------------------------------------------------------------------- backward


def backward_decoder(
    trace: DecoderTrace,
    dlogits: np.ndarray,
    params: DecoderParams,
    encoder_grid: tuple[int, int],
    common_grid: tuple[int, int],
) -> DecoderParams:
    """Gradients of the loss w.r.t. every decoder tensor.

    ``dlogits`` has the shape of ``trace.logits`` (token resolution; callers
    with a pixel loss pass it through the upsample adjoint first).
    """
    if dlogits.shape != trace.logits.shape:
        raise ShapeError(f"logit gradient {dlogits.shape} does not match logits {trace.logits.shape}")
    hid = params["head_w1"].shape[1]
    n = dlogits.shape[-1]
    grads = {}

    dy = dlogits.reshape(-1, n)
    act = trace.act.reshape(-1, hid)
    grads["head_w2"] = act.T @ dy
    grads["head_b2"] = dy.sum(axis=0)

    d_act = dy @ params["head_w2"].T
    d_pre = d_act * T.gelu_grad(trace.pre.reshape(-1, hid))
    fused = trace.fused.reshape(-1, trace.fused.shape[-1])
    grads["head_w1"] = fused.T @ d_pre
    grads["head_b1"] = d_pre.sum(axis=0)

    d_fused = (d_pre @ params["head_w1"].T).reshape(trace.fused.shape)
    lead = trace.fused.shape[:-2]
    h, w = encoder_grid
    hc, wc = common_grid
    for k, z in enumerate(trace.taps):
        w_k, _ = params.proj(k)
        c = w_k.shape[1]
        d_tilde = d_fused[..., k * c:(k + 1) * c]
        if (h, w) != (hc, wc):
            d_tilde = T.bilinear_resize_adjoint(d_tilde.reshape(*lead, hc, wc, c), h, w).reshape(*lead, h * w, c)
        d_proj = d_tilde.reshape(-1, c)
        grads[f"proj{k}_w"] = z.reshape(-1, z.shape[-1]).T @ d_proj
        grads[f"proj{k}_b"] = d_proj.sum(axis=0)

    return DecoderParams({name: grads[name] for name in params})


@dataclass
class Batch:
    """Cached tap features ``K x [B, N, d]`` and targets for one step."""

    taps: list[np.ndarray]
    token_labels: np.ndarray | None  # [B, N_c]; None when only pixel loss is possible
    pixel_labels: np.ndarray  # [B, H, W]


def loss_and_grads(
    batch: Batch,
    params: DecoderParams,
    encoder_grid: tuple[int, int],
    common_grid: tuple[int, int],
    loss_resolution: str = "token",
    class_weights: np.ndarray | None = None,
    want_grads: bool = True,
):
    """Forward, cross-entropy, and (optionally) backward for one batch."""
    trace = decode(batch.taps, params, encoder_grid, common_grid)
    n = trace.logits.shape[-1]
    if loss_resolution == "token":
        loss, d = cross_entropy(trace.logits.reshape(-1, n), batch.token_labels, class_weights)
        dlogits = d.reshape(trace.logits.shape)
    else:
        out_hw = batch.pixel_labels.shape[-2:]
        pix = upsample_logits(trace.logits, common_grid, out_hw)
        loss, d = cross_entropy(pix.reshape(-1, n), batch.pixel_labels, class_weights)
        d = T.bilinear_resize_adjoint(d.reshape(pix.shape), *common_grid)
        dlogits = d.reshape(trace.logits.shape)
    if not want_grads:
        return loss, None
    return loss, backward_decoder(trace, dlogits, params, encoder_grid, common_grid)


# --------------------------------------------------------------------------- gradient oracle


def finite_diff_grad(loss_fn: Callable[[DecoderParams], float], params: DecoderParams, name: str, index, step: float) -> float:
    """Central difference ``(L(theta + h e) - L(theta - h e)) / 2h`` for one element, in f64."""
    if not step > 0:
        raise ValueError("finite-difference step must be > 0")
    arr = params[name]
    if arr.dtype != np.float64:
        raise TypeError("finite differences are evaluated on f64 parameters")
    orig = arr[index]
    try:
        arr[index] = orig + step
        up = loss_fn(params)
        arr[index] = orig - step
        down = loss_fn(params)
    finally:
        arr[index] = orig
    return (up - down) / (2 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps round-off on near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


# --------------------------------------------------------------------------- optimiser


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: DecoderParams) -> "AdamWState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adamw_step(params: DecoderParams, grads: DecoderParams, state: AdamWState, cfg: TrainConfig) -> tuple[DecoderParams, AdamWState]:
    """One AdamW update with decay decoupled from the adaptive step.

    ``theta <- theta * (1 - lr*wd)`` first, then
    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)``.
    Returns new objects; the inputs are left untouched.
    """
    t = state.t + 1
    lr, wd, b1, b2, eps = cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps_adam
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        dt = theta.dtype.type
        m = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = dt(b2) * state.v[name] + dt(1 - b2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        decayed = theta * dt(1.0 - lr * wd) if wd else theta
        new_p[name] = decayed - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        new_m[name], new_v[name] = m, v
    return DecoderParams(new_p), AdamWState(new_m, new_v, t)


# --------------------------------------------------------------------------- training loop


def encode_samples(samples, encoder: EncoderParams, enc_cfg: EncoderConfig, preprocess=None) -> list[list[np.ndarray]]:
    """Tap features for every sample (the encoder is frozen, so this runs once)."""
    feats = []
    for i, s in enumerate(samples):
        image = s.image if preprocess is None else preprocess(s.image)
        try:
            feats.append(forward_collect(image, encoder, enc_cfg))
        except ShapeError as exc:
            raise DataError(f"sample {i} ({getattr(s, 'id', '?')}): {exc}", index=i) from exc
    return feats


def make_batch(indices, feats, samples, common_grid, dtype) -> Batch:
    k = len(feats[indices[0]])
    taps = [np.stack([feats[i][j] for i in indices]).astype(dtype, copy=False) for j in range(k)]
    pixel = np.stack([samples[i].mask.labels for i in indices])
    token = np.stack([pool_labels(samples[i].mask, common_grid) for i in indices])
    return Batch(taps, token, pixel)


@dataclass
class LossRecord:
    step: int
    epoch: int
    loss: float


@dataclass
class TrainResult:
    params: DecoderParams
    losses: list[LossRecord]
    encoder_checksum: str
    state: AdamWState | None = None
    class_weights: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def loss_csv(records: Sequence[LossRecord]) -> str:
    return "step,epoch,loss\n" + "".join(f"{r.step},{r.epoch},{r.loss!r}\n" for r in records)


def train(
    samples,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    cfg: TrainConfig,
    encoder: EncoderParams | None = None,
    preprocess=None,
    max_steps: int | None = None,
    on_step: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    """Train decoder parameters on ``samples`` (objects with ``.image``, ``.mask``, ``.id``).

    Shuffling uses the stream ``(cfg.seed, "shuffle", epoch)``. A non-finite
    loss raises :class:`NumericError` carrying the step number.
    """
    if not samples:
        raise DataError("training set is empty")
    if dec_cfg.tap_count != len(enc_cfg.tap_layers):
        raise ConfigError(
            f"decoder.tap_count={dec_cfg.tap_count} must equal len(encoder.tap_layers)={len(enc_cfg.tap_layers)}"
        )
    dtype = T.resolve_dtype(cfg.dtype)
    if encoder is None:
        encoder = init_frozen(enc_cfg, cfg.dtype)
    checksum = encoder.checksum()
    grid = dec_cfg.grid_for(enc_cfg)
    feats = encode_samples(samples, encoder, enc_cfg, preprocess)
    for i, s in enumerate(samples):
        if s.mask.labels.max() >= dec_cfg.n_class:
            raise DataError(f"sample {i} ({s.id}): label {s.mask.labels.max()} >= n_class={dec_cfg.n_class}", index=i)

    weights = None
    if cfg.class_weighting == "inverse_frequency":
        if cfg.loss_resolution == "token":
            all_labels = np.concatenate([pool_labels(s.mask, grid) for s in samples])
        else:
            all_labels = np.concatenate([s.mask.labels.ravel() for s in samples])
        weights = inverse_frequency_weights(all_labels, dec_cfg.n_class)

    params = init_params(dec_cfg, enc_cfg.embed_dim, cfg.seed, cfg.dtype)
    state = AdamWState.zeros_like(params)
    records: list[LossRecord] = []
    step = 0
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch(idx, feats, samples, grid, dtype)
            loss, grads = loss_and_grads(batch, params, enc_cfg.grid, grid, cfg.loss_resolution, weights)
            step += 1
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch})", step=step)
            params, state = adamw_step(params, grads, state, cfg)
            rec = LossRecord(step, epoch, loss)
            records.append(rec)
            if on_step is not None:
                on_step(rec)
            if max_steps is not None and step >= max_steps:
                break
        if encoder.checksum() != checksum:
            raise SegDinoError(f"encoder parameters changed during epoch {epoch}")
        log.info("epoch %d done, last loss %.6f", epoch, records[-1].loss if records else float("nan"))
        if max_steps is not None and step >= max_steps:
            break
    return TrainResult(params, records, checksum, state, weights)


# --------------------------------------------------------------------------- gradcheck


def random_decoder_params(dec_cfg: DecoderConfig, embed_dim: int, seed: int) -> DecoderParams:
    """f64 parameters with fan-in scaled normal entries, biases included.

    Used for gradient checks: larger than the training init so every
    group has gradients well above round-off.
    """
    from segdino.decoder import param_shapes

    arrays = {}
    for name, shape in param_shapes(dec_cfg, embed_dim).items():
        rng = stream(seed, "gradcheck-params", name)
        fan_in = shape[0] if len(shape) == 2 else 1
        scale = 1.0 / math.sqrt(fan_in) if len(shape) == 2 else 0.1
        arrays[name] = rng.standard_normal(shape) * scale
    return DecoderParams(arrays)


@dataclass
class GradcheckGroup:
    name: str
    n_checked: int
    max_rel_error: float
    passed: bool


def gradcheck(
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    seed: int = 0,
    loss_resolution: str = "token",
    batch_size: int = 2,
    elements_per_group: int = 24,
    tolerance: float = 1e-4,
    perturb: str | None = None,
    preprocess=None,
) -> list[GradcheckGroup]:
    """Compare :func:`backward_decoder` against central differences for every group.

    Inputs are random images and random blob masks; decoder params are
    random (see :func:`random_decoder_params`). ``perturb`` names a group
    whose analytic gradient is scaled by 1.01 (negative control).
    """
    encoder = init_frozen(enc_cfg, "f64")
    grid = dec_cfg.grid_for(enc_cfg)
    rng = stream(seed, "gradcheck-data")
    taps_per = []
    pixel = []
    for _ in range(batch_size):
        image = rng.uniform(0.0, 1.0, (enc_cfg.image_h, enc_cfg.image_w, 3))
        if preprocess is not None:
            image = preprocess(image)
        taps_per.append(forward_collect(image, encoder, enc_cfg))
        pixel.append(_random_blob_mask(rng, enc_cfg.image_h, enc_cfg.image_w, dec_cfg.n_class))
    taps = [np.stack([t[k] for t in taps_per]) for k in range(len(taps_per[0]))]
    pixel_labels = np.stack(pixel)
    divides = enc_cfg.image_h % grid[0] == 0 and enc_cfg.image_w % grid[1] == 0
    token_labels = np.stack([pool_labels(m, grid) for m in pixel]) if divides else None
    batch = Batch(taps, token_labels, pixel_labels)

    params = random_decoder_params(dec_cfg, enc_cfg.embed_dim, seed)
    _, grads = loss_and_grads(batch, params, enc_cfg.grid, grid, loss_resolution)
    if perturb is not None:
        grads[perturb] = grads[perturb] * 1.01

    def loss_fn(p):
        return loss_and_grads(batch, p, enc_cfg.grid, grid, loss_resolution, want_grads=False)[0]

    results = []
    for name in params:
        g = grads[name]
        pick = stream(seed, "gradcheck-pick", name)
        flat = list(pick.choice(g.size, size=min(elements_per_group, g.size), replace=False))
        top = int(np.argmax(np.abs(g)))
        if top not in flat:
            flat.append(top)
        worst = 0.0
        for f in flat:
            idx = np.unravel_index(int(f), g.shape)
            step = 1e-5 * max(1.0, abs(float(params[name][idx])))
            num = finite_diff_grad(loss_fn, params, name, idx, step)
            worst = max(worst, relative_error(float(g[idx]), num))
        results.append(GradcheckGroup(name, len(flat), worst, worst <= tolerance))
    return results


def _random_blob_mask(rng: np.random.Generator, h: int, w: int, n_class: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    for k in range(1, n_class):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.15, 0.35) * min(h, w)
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = k
    return labels
