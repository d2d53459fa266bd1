"""Segmentation metrics over crisp masks plus ranking-based average precision.

All crisp metrics are derived from voxel confusion counts.  Average precision
follows the step-wise sum AP = sum_n (R_n - R_{n-1}) P_n over the
precision-recall curve traced by descending distinct probability thresholds,
with prediction sets {p >= t}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .resample import MaskVolume, Volume, require_crisp, resample_trilinear, threshold


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    jaccard: float
    dice: float
    precision: float
    recall: float
    absolute_volume_difference: int
    average_precision: float
    counts: ConfusionCounts | None = None

    CSV_HEADER = "jaccard,dice,precision,recall,avd,ap"

    def csv_row(self) -> str:
        cols = (self.jaccard, self.dice, self.precision, self.recall,
                float(self.absolute_volume_difference), self.average_precision)
        return ",".join(f"{c:.6f}" for c in cols)


def _crisp_pair(pred: MaskVolume, gt: MaskVolume) -> tuple[np.ndarray, np.ndarray]:
    require_crisp(pred, "prediction")
    require_crisp(gt, "ground truth")
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: prediction {pred.dims} vs ground truth {gt.dims}")
    return pred.voxels > 0.5, gt.voxels > 0.5


def confusion(pred: MaskVolume, gt: MaskVolume) -> ConfusionCounts:
    p, g = _crisp_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def jaccard(pred: MaskVolume, gt: MaskVolume) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    c = confusion(pred, gt)
    union = c.tp + c.fp + c.fn
    return c.tp / union if union else 1.0


def dice(pred: MaskVolume, gt: MaskVolume) -> float:
    c = confusion(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 1.0


def precision_recall(pred: MaskVolume, gt: MaskVolume) -> tuple[float, float]:
    """(precision, recall); an empty denominator means the corresponding
    error set is empty, so that side scores 1."""
    c = confusion(pred, gt)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    return precision, recall


def absolute_volume_difference(pred: MaskVolume, gt: MaskVolume) -> int:
    p, g = _crisp_pair(pred, gt)
    return abs(int(np.count_nonzero(p)) - int(np.count_nonzero(g)))


def average_precision(prob: Volume, gt: MaskVolume) -> float:
    require_crisp(gt, "ground truth")
    if prob.dims != gt.dims:
        raise ValueError(f"dims mismatch: probabilities {prob.dims} vs ground truth {gt.dims}")
    labels = gt.voxels.reshape(-1) > 0.5
    npos = int(np.count_nonzero(labels))
    if npos == 0:
        raise ValueError("average precision is undefined for an empty ground truth")
    scores = prob.voxels.reshape(-1).astype(np.float64)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    labels = labels[order]
    tp_cum = np.cumsum(labels)
    # last position of each distinct score = the prediction set {p >= score}
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = tp_cum[last].astype(np.float64)
    total = last + 1.0
    prec = tp / total
    rec = tp / npos
    return float(np.sum(np.diff(np.r_[0.0, rec]) * prec))


def average_annotations(masks: list[MaskVolume]) -> MaskVolume:
    """Voxelwise mean of all annotations; the soft training/eval target."""
    if not masks:
        raise ValueError("need at least one annotation")
    dims = masks[0].dims
    for m in masks[1:]:
        if m.dims != dims:
            raise ValueError(f"annotation dims mismatch: {m.dims} vs {dims}")
    mean = np.mean([m.voxels for m in masks], axis=0, dtype=np.float64)
    return MaskVolume(dims, mean.astype(np.float32))


def report_from_masks(pred: MaskVolume, gt: MaskVolume, ap: float) -> MetricsReport:
    c = confusion(pred, gt)
    union = c.tp + c.fp + c.fn
    j = c.tp / union if union else 1.0
    d_denom = 2 * c.tp + c.fp + c.fn
    d = 2 * c.tp / d_denom if d_denom else 1.0
    prec = c.tp / (c.tp + c.fp) if c.tp + c.fp else 1.0
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    avd = abs((c.tp + c.fp) - (c.tp + c.fn))
    return MetricsReport(j, d, prec, rec, avd, ap, c)


def evaluate_full(prob_small: Volume, gt_full: MaskVolume, full_dims) -> MetricsReport:
    """Upscale a network-resolution probability map to full_dims, score AP on
    the upscaled probabilities, then threshold at 0.5 for the crisp metrics."""
    full_dims = tuple(int(d) for d in full_dims)
    if gt_full.dims != full_dims:
        raise ValueError(f"ground truth dims {gt_full.dims} do not match full dims {full_dims}")
    prob_full = resample_trilinear(prob_small, full_dims)
    ap = average_precision(prob_full, gt_full)
    pred = threshold(prob_full, 0.5)
    return report_from_masks(pred, gt_full, ap)
