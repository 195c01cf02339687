"""Segmentation metrics, model complexity counters and the Wilcoxon test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import directed_hausdorff
from scipy.special import ndtr
from scipy.stats import rankdata

from gfkd import ops
from gfkd.networks import Discriminator, MiniUNet, Paraphraser
from gfkd.tensor import Tensor


def _same_shape(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def pixel_accuracy(pred, gt) -> float:
    pred, gt = _same_shape(pred, gt)
    return float((pred == gt).mean())


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """(num_classes, num_classes) counts, rows = ground truth."""
    pred, gt = _same_shape(pred, gt)
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_per_class(conf: np.ndarray) -> np.ndarray:
    """IoU per class from a confusion matrix; NaN where a class is absent from both."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)


def miou(pred, gt, num_classes: int) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    ious = iou_per_class(confusion(pred, gt, num_classes))
    return float(np.nanmean(ious)) if np.any(~np.isnan(ious)) else 1.0


def dsc(pred, gt, cls: int) -> float:
    pred, gt = _same_shape(pred, gt)
    a, b = pred == cls, gt == cls
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or lying on the image edge."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def hausdorff(pred, gt, cls: int) -> float:
    """Symmetric Hausdorff distance (pixels) between the class boundaries.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    pred, gt = _same_shape(pred, gt)
    pa = np.argwhere(boundary(pred == cls))
    pb = np.argwhere(boundary(gt == cls))
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        h, w = pred.shape
        return math.hypot(h - 1, w - 1)
    return float(max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0]))


@dataclass
class MetricReport:
    acc: float
    miou: float
    dsc: List[float]
    hd: List[float]
    count: int
    dsc_mean: float = field(init=False)
    hd_mean: float = field(init=False)

    def __post_init__(self):
        self.dsc_mean = float(np.mean(self.dsc)) if self.dsc else 1.0
        self.hd_mean = float(np.mean(self.hd)) if self.hd else 0.0


def evaluate(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricReport:
    """Aggregate a stack of (N, H, W) label maps.

    ACC and mIoU pool pixels over the whole stack. DSC and HD are computed
    per sample for each foreground class (class 0 is background) and averaged.
    """
    pred, gt = _same_shape(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    conf = confusion(pred, gt, num_classes)
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 1.0
    ious = iou_per_class(conf)
    m = float(np.nanmean(ious)) if np.any(~np.isnan(ious)) else 1.0
    classes = range(1, num_classes)
    d = [float(np.mean([dsc(p, g, c) for p, g in zip(pred, gt)])) for c in classes]
    h = [float(np.mean([hausdorff(p, g, c) for p, g in zip(pred, gt)])) for c in classes]
    return MetricReport(acc=acc, miou=m, dsc=d, hd=h, count=len(pred))


def count_params(net) -> int:
    return net.params.count()


def count_flops(net, input_shape: Sequence[int]) -> int:
    """2 x multiply-accumulates of every conv / transposed conv / affine layer.

    ``input_shape`` excludes the batch axis. Bias additions and activations are
    not counted.
    """
    x = Tensor(np.zeros((1,) + tuple(input_shape)))
    p = net.frozen_view()
    with ops.count_macs() as box:
        if isinstance(net, MiniUNet):
            net.forward(x, p)
        elif isinstance(net, Paraphraser):
            net.reconstruct(x, p)
        elif isinstance(net, Discriminator):
            m = net.in_channels - net.image_channels
            net.discriminate(Tensor(x.data[:, :m]), Tensor(x.data[:, m:]), p)
        else:
            raise TypeError(f"cannot trace {type(net).__name__}")
    return 2 * box[0]


# ------------------------------------------------------------------ Wilcoxon


def _signed_ranks(diffs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = diffs[diffs != 0]
    return rankdata(np.abs(d)), d


def _exact_null(ranks: np.ndarray) -> np.ndarray:
    """Counts of each attainable 2*W+ under random signs (ranks may be half-integers)."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(doubled.sum() + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(pairs: Sequence[Tuple[float, float]], alternative: str = "two-sided", exact_max: int = 20) -> float:
    """p-value of the signed-rank test on differences a - b.

    Zero differences are dropped and tied magnitudes share average ranks.
    Up to ``exact_max`` non-zero differences the null distribution is
    enumerated exactly; beyond that a continuity-corrected normal
    approximation (with tie correction) is used. ``alternative="greater"``
    tests whether a tends to exceed b.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one pair")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    arr = np.asarray(pairs, dtype=np.float64)
    diffs = arr[:, 0] - arr[:, 1]
    ranks, d = _signed_ranks(diffs)
    n = len(d)
    if n == 0:
        return 1.0
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max:
        counts = _exact_null(ranks)
        total = counts.sum()
        k = int(round(2 * w_plus))
        p_le = float(counts[: k + 1].sum() / total)
        p_ge = float(counts[k:].sum() / total)
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
        sd = math.sqrt(var)
        p_le = float(ndtr((w_plus - mean + 0.5) / sd))
        p_ge = float(1.0 - ndtr((w_plus - mean - 0.5) / sd))
    if alternative == "greater":
        return min(1.0, p_ge)
    if alternative == "less":
        return min(1.0, p_le)
    return min(1.0, 2.0 * min(p_le, p_ge))
