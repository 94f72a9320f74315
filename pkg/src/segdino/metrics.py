"""Binary segmentation metrics.

Foreground is class 1. Conventions that the literature leaves open:

* Dice and IoU are 1.0 when prediction and ground truth are both empty.
* HD95 uses all foreground pixel centres (unit spacing). Each directed
  distance set is reduced with the 95th percentile, interpolating linearly
  between order statistics, and the two directions are combined with max.
  It is undefined when exactly one mask is empty and 0 when both are.
* F-beta defaults to beta^2 = 0.3 with a 0.5 threshold.
* BER, S-BER and N-BER are percentages; a component is undefined when its
  ground-truth class is absent.

Undefined values are ``None`` and are skipped (and counted) by
:func:`aggregate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from segdino.errors import DomainError, ShapeError, SegDinoError

HD95_CONVENTION = "max of directed p95, linear percentile, pixel centres"
METRIC_NAMES = ("dsc", "iou", "hd95", "acc", "fbeta", "mae", "ber", "s_ber", "n_ber")


@dataclass(frozen=True)
class Mask:
    """Integer class-label grid ``[H, W]``."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels))
        if labels.ndim != 2 or min(labels.shape) < 1:
            raise ShapeError(f"mask must be a non-empty 2-D grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise DomainError("mask labels must be integers")
            labels = labels.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise DomainError("mask labels must be non-negative")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def is_binary(self) -> bool:
        return bool(np.all((self.labels == 0) | (self.labels == 1)))

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.labels.shape, self.labels.tobytes()))


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, Mask) else np.asarray(m)


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    for name, arr in (("prediction", p), ("ground truth", g)):
        if not np.all((arr == 0) | (arr == 1)):
            raise DomainError(f"{name} mask is not binary")
    return p.astype(bool), g.astype(bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _binary_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def pixel_accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def ber(c: ConfusionCounts) -> tuple[float | None, float | None, float | None]:
    """``(ber, s_ber, n_ber)`` in percent.

    ``s_ber = 100 * fn / (tp + fn)`` and ``n_ber = 100 * fp / (tn + fp)``,
    i.e. one minus the per-class recall. Missing classes give ``None``.
    """
    pos, neg = c.tp + c.fn, c.tn + c.fp
    s_ber = 100 * c.fn / pos if pos else None
    n_ber = 100 * c.fp / neg if neg else None
    if s_ber is None or n_ber is None:
        return None, s_ber, n_ber
    return (s_ber + n_ber) / 2, s_ber, n_ber


def percentile_linear(values: np.ndarray, q: float) -> float:
    """``q``-th percentile with linear interpolation at rank ``q/100 * (n-1)``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    rank = q / 100.0 * (v.size - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each foreground pixel of ``src`` to the nearest one of ``dst``."""
    # exact Euclidean transform of the complement of dst
    field_ = distance_transform_edt(~dst)
    return field_[src]


def hd95(pred, gt) -> float | None:
    p, g = _binary_pair(pred, gt)
    has_p, has_g = p.any(), g.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return None
    return max(
        percentile_linear(directed_distances(p, g), 95.0),
        percentile_linear(directed_distances(g, p), 95.0),
    )


def _prob_grid(pred_prob, gt_shape) -> np.ndarray:
    prob = np.asarray(pred_prob, dtype=np.float64)
    if prob.shape != gt_shape:
        raise ShapeError(f"probability map {prob.shape} and ground truth {gt_shape} differ in size")
    if prob.size and (np.nanmin(prob) < 0 or np.nanmax(prob) > 1 or np.isnan(prob).any()):
        raise DomainError("probabilities must lie in [0, 1]")
    return prob


def f_beta(pred_prob, gt, beta_sq: float = 0.3, threshold: float = 0.5) -> float:
    """F-measure of the thresholded map (``prob >= threshold`` is foreground)."""
    g = _labels(gt)
    prob = _prob_grid(pred_prob, g.shape)
    c = confusion((prob >= threshold).astype(np.int64), g)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    denom = beta_sq * precision + recall
    return 0.0 if denom == 0 else (1 + beta_sq) * precision * recall / denom


def mae(pred_prob, gt) -> float:
    g = _labels(gt)
    prob = _prob_grid(pred_prob, g.shape)
    if not np.all((g == 0) | (g == 1)):
        raise DomainError("ground truth mask is not binary")
    return float(np.abs(prob - g).mean())


@dataclass
class MetricReport:
    """Named metric values; ``None`` marks an undefined value.

    For aggregates, ``counts`` records how many samples defined each metric.
    """

    values: dict[str, float | None]
    aggregate: bool = False
    sample_id: str = ""
    counts: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float | None:
        return self.values[name]

    def excluded(self, name: str, n_samples: int) -> int:
        return n_samples - self.counts.get(name, 0)


def evaluate(
    pred: Mask,
    gt: Mask,
    pred_prob: np.ndarray | None = None,
    beta_sq: float = 0.3,
    threshold: float = 0.5,
    sample_id: str = "",
) -> MetricReport:
    """All metrics for one prediction. ``pred_prob`` defaults to the hard mask."""
    c = confusion(pred, gt)
    if pred_prob is None:
        pred_prob = _labels(pred).astype(np.float64)
    b, s, n = ber(c)
    values = {
        "dsc": dice(c),
        "iou": iou(c),
        "hd95": hd95(pred, gt),
        "acc": pixel_accuracy(c),
        "fbeta": f_beta(pred_prob, gt, beta_sq, threshold),
        "mae": mae(pred_prob, gt),
        "ber": b,
        "s_ber": s,
        "n_ber": n,
    }
    return MetricReport(values, sample_id=sample_id)


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-metric mean over the samples where the metric is defined."""
    if not reports:
        raise SegDinoError("aggregate needs at least one report")
    names = list(reports[0].values)
    values, counts = {}, {}
    for name in names:
        defined = [r.values[name] for r in reports if r.values.get(name) is not None]
        counts[name] = len(defined)
        values[name] = math.fsum(defined) / len(defined) if defined else None
    return MetricReport(values, aggregate=True, sample_id="mean", counts=counts)


def _cell(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def report_csv(reports: Sequence[MetricReport], summary: MetricReport | None = None) -> str:
    """CSV text: ``sample_id,dsc,...,n_ber``; empty cells are undefined."""
    lines = ["sample_id," + ",".join(METRIC_NAMES)]
    rows = list(reports) + ([summary] if summary is not None else [])
    for r in rows:
        lines.append(r.sample_id + "," + ",".join(_cell(r.values.get(m)) for m in METRIC_NAMES))
    return "\n".join(lines) + "\n"


def summary_table(summary: MetricReport, n_samples: int, beta_sq: float = 0.3, threshold: float = 0.5) -> str:
    """Human-readable aggregate table with definedness counts."""
    lines = [
        f"# samples: {n_samples}",
        f"# hd95 convention: {HD95_CONVENTION}",
        f"# f_beta: beta^2={beta_sq} threshold={threshold}",
        f"{'metric':<8} {'mean':>12} {'defined':>8} {'excluded':>9}",
    ]
    for m in METRIC_NAMES:
        v = summary.values.get(m)
        shown = "undefined" if v is None else f"{v:.6f}"
        count = summary.counts.get(m, 0)
        lines.append(f"{m:<8} {shown:>12} {count:>8} {n_samples - count:>9}")
    return "\n".join(lines) + "\n"
