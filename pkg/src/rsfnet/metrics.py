"""Segmentation metrics, parameter/FLOPs accounting, and latency timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


class ConfusionMatrix:
    """C x C pixel counts; rows index ground truth, columns prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"accumulate: shape mismatch {gt.shape} vs {pred.shape}")
        c = self.num_classes
        if gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c:
            raise ValueError(f"accumulate: class index out of range [0, {c})")
        flat = np.bincount(gt * c + pred, minlength=c * c)
        self.counts += flat.reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricReport:
    acc: np.ndarray  # per-class recall, nan for classes absent from gt
    iou: np.ndarray  # per-class IoU, nan where gt+pred never see the class
    macc: float
    miou: float
    excluded: list = field(default_factory=list)  # classes left out of the means


def macc_miou(cm: ConfusionMatrix, include_class0: bool = True) -> MetricReport:
    """Per-class accuracy/IoU and their means over non-empty classes.

    acc_c = diag_c / rowsum_c; iou_c = diag_c / (rowsum_c + colsum_c - diag_c).
    Classes with a zero denominator are excluded from the means and listed
    in `excluded`; include_class0=False additionally drops class 0 (the
    unlabeled class) from both means.
    """
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    union = rows + cols - diag
    acc = np.divide(diag, rows, out=np.full_like(diag, np.nan), where=rows > 0)
    iou = np.divide(diag, union, out=np.full_like(diag, np.nan), where=union > 0)
    keep = union > 0
    if not include_class0 and cm.num_classes > 0:
        keep = keep.copy()
        keep[0] = False
    excluded = [int(c) for c in np.nonzero(union == 0)[0]]
    acc_keep = acc[keep & (rows > 0)]
    iou_keep = iou[keep]
    macc = float(acc_keep.mean()) if acc_keep.size else 0.0
    miou = float(iou_keep.mean()) if iou_keep.size else 0.0
    return MetricReport(acc=acc, iou=iou, macc=macc, miou=miou, excluded=excluded)


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    trials: int


@dataclass
class CostReport:
    """Inference cost: parameter count and FLOPs (2 per multiply-add)."""

    params: int
    flops: int
    by_kind: dict = field(default_factory=dict)
    latency: LatencyStats | None = None


def conv_cost(c_in, c_out, kh, kw, out_h, out_w, bias: bool = True) -> tuple[int, int]:
    """(params, flops) of one conv layer at the given output extents."""
    params = c_out * c_in * kh * kw + (c_out if bias else 0)
    flops = 2 * c_out * c_in * kh * kw * out_h * out_w + (c_out * out_h * out_w if bias else 0)
    return params, flops


def fc_cost(n_in, n_out, bias: bool = True) -> tuple[int, int]:
    params = n_out * n_in + (n_out if bias else 0)
    flops = 2 * n_in * n_out + (n_out if bias else 0)
    return params, flops


def evaluate_model(net, samples, include_class0: bool = True):
    """Predict every sample and score it; returns (cm, MetricReport, preds)."""
    cm = ConfusionMatrix(net.cfg.num_classes)
    preds = {}
    for s in samples:
        pred = net.predict(s.rgb, s.thm)
        cm.accumulate(s.gt, pred)
        preds[s.id] = pred
    return cm, macc_miou(cm, include_class0), preds


def count_cost(net, input_hw: tuple[int, int]) -> CostReport:
    """Parameter count plus traced inference FLOPs at the given extents."""
    from . import nn
    from . import tensor as T

    h, w = input_hw
    dtype = net.cfg.dtype()
    rgb = T.Tensor(np.zeros((1, 3, h, w), dtype=dtype))
    thm = T.Tensor(np.zeros((1, 1, h, w), dtype=dtype))
    with T.no_grad(), nn.record_costs() as rec:
        net.forward(rgb, thm, training=False)
    return CostReport(params=net.param_count(), flops=rec.flops, by_kind=dict(rec.by_kind))


def bench_latency(fn, trials: int = 20, warmup: int = 3) -> LatencyStats:
    """Wall-clock stats (ms) of fn() over `trials` runs after warmup."""
    if trials < 1:
        raise ValueError("bench_latency: trials must be >= 1")
    for _ in range(warmup):
        fn()
    times = np.empty(trials)
    for i in range(trials):
        t0 = time.perf_counter()
        fn()
        times[i] = (time.perf_counter() - t0) * 1e3
    return LatencyStats(
        mean_ms=float(times.mean()),
        p50_ms=float(np.percentile(times, 50)),
        p95_ms=float(np.percentile(times, 95)),
        trials=trials,
    )
