import numpy as np
import pytest

from voxelseg.metrics import (MetricsReport, absolute_volume_difference, average_annotations,
                              average_precision, confusion, dice, evaluate_full, jaccard,
                              precision_recall, report_from_masks)
from voxelseg.resample import MaskVolume, Volume, resample_trilinear


def _mask(bits, dims=(4, 3, 2)):
    w, h, z = dims
    arr = np.asarray(bits, dtype=np.float32).reshape(z, h, w)
    return MaskVolume(dims, arr)


def _random_pair(rng, dims=(8, 8, 4)):
    w, h, z = dims
    pred = (rng.uniform(size=(z, h, w)) > 0.5).astype(np.float32)
    gt = (rng.uniform(size=(z, h, w)) > 0.5).astype(np.float32)
    return MaskVolume(dims, pred), MaskVolume(dims, gt)


def _counts_oracle(pred, gt):
    # independent scalar loop over voxels
    tp = fp = fn = tn = 0
    for p, g in zip(pred.voxels.reshape(-1), gt.voxels.reshape(-1)):
        if p > 0.5 and g > 0.5:
            tp += 1
        elif p > 0.5:
            fp += 1
        elif g > 0.5:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def _ap_oracle(scores, labels):
    # exhaustive sweep over distinct thresholds, prediction set {s >= t}
    npos = int(sum(labels))
    ap, prev_rec = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        picked = [l for s, l in zip(scores, labels) if s >= t]
        prec = sum(picked) / len(picked)
        rec = sum(picked) / npos
        ap += (rec - prev_rec) * prec
        prev_rec = rec
    return ap


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pred, gt = _random_pair(rng)
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == _counts_oracle(pred, gt)
        assert c.total == pred.voxel_count


def test_crisp_metrics_match_count_formulas():
    rng = np.random.default_rng(4)
    for _ in range(50):
        pred, gt = _random_pair(rng)
        tp, fp, fn, _ = _counts_oracle(pred, gt)
        assert jaccard(pred, gt) == pytest.approx(tp / (tp + fp + fn), abs=1e-12)
        assert dice(pred, gt) == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)
        prec, rec = precision_recall(pred, gt)
        assert prec == pytest.approx(tp / (tp + fp), abs=1e-12)
        assert rec == pytest.approx(tp / (tp + fn), abs=1e-12)
        assert absolute_volume_difference(pred, gt) == abs((tp + fp) - (tp + fn))


def test_dice_jaccard_identity():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pred, gt = _random_pair(rng)
        j, d = jaccard(pred, gt), dice(pred, gt)
        assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)


def test_empty_conventions():
    zeros = _mask(np.zeros(24))
    ones = _mask(np.ones(24))
    assert jaccard(zeros, zeros) == 1.0
    assert dice(zeros, zeros) == 1.0
    assert precision_recall(zeros, zeros) == (1.0, 1.0)
    # empty prediction against real ground truth: no false positives
    prec, rec = precision_recall(zeros, ones)
    assert prec == 1.0 and rec == 0.0
    assert jaccard(zeros, ones) == 0.0


def test_dims_and_crispness_rejected():
    a = _mask(np.zeros(24), (4, 3, 2))
    b = MaskVolume((2, 3, 4), np.zeros((4, 3, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="dims"):
        jaccard(a, b)
    soft = MaskVolume((4, 3, 2), np.full((2, 3, 4), 0.25, dtype=np.float32))
    with pytest.raises(ValueError, match="crisp"):
        confusion(soft, a)


def test_average_precision_matches_exhaustive_oracle():
    rng = np.random.default_rng(6)
    dims = (4, 3, 2)
    for _ in range(60):
        scores = rng.uniform(size=24).astype(np.float32)
        labels = rng.uniform(size=24) > 0.6
        if not labels.any():
            labels[0] = True
        prob = Volume(dims, scores.reshape(2, 3, 4))
        gt = MaskVolume(dims, labels.reshape(2, 3, 4).astype(np.float32))
        got = average_precision(prob, gt)
        want = _ap_oracle([float(s) for s in scores], [bool(l) for l in labels])
        assert got == pytest.approx(want, abs=1e-9)


def test_average_precision_handles_ties():
    dims = (4, 1, 1)
    prob = Volume(dims, np.array([[[0.7, 0.7, 0.2, 0.2]]], dtype=np.float32))
    gt = MaskVolume(dims, np.array([[[1, 0, 1, 0]]], dtype=np.float32))
    # thresholds 0.7 then 0.2: P=(1/2, 2/4), R=(1/2, 1)
    assert average_precision(prob, gt) == pytest.approx(0.5 * 0.5 + 0.5 * 0.5, abs=1e-12)


def test_perfect_ranking_gives_ap_one():
    dims = (4, 1, 1)
    prob = Volume(dims, np.array([[[0.9, 0.8, 0.1, 0.0]]], dtype=np.float32))
    gt = MaskVolume(dims, np.array([[[1, 1, 0, 0]]], dtype=np.float32))
    assert average_precision(prob, gt) == pytest.approx(1.0, abs=1e-12)


def test_average_precision_requires_positives():
    dims = (2, 1, 1)
    prob = Volume(dims, np.zeros((1, 1, 2), dtype=np.float32))
    gt = MaskVolume(dims, np.zeros((1, 1, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="empty ground truth"):
        average_precision(prob, gt)


def test_average_annotations_is_voxel_mean():
    dims = (2, 2, 1)
    m1 = MaskVolume(dims, np.array([[[1, 0], [1, 0]]], dtype=np.float32))
    m2 = MaskVolume(dims, np.array([[[1, 1], [0, 0]]], dtype=np.float32))
    avg = average_annotations([m1, m2])
    np.testing.assert_allclose(avg.voxels, [[[1.0, 0.5], [0.5, 0.0]]])
    with pytest.raises(ValueError):
        average_annotations([])
    with pytest.raises(ValueError, match="mismatch"):
        average_annotations([m1, MaskVolume((1, 2, 2), np.zeros((2, 2, 1), dtype=np.float32))])


def test_report_from_masks_carries_counts():
    rng = np.random.default_rng(7)
    pred, gt = _random_pair(rng)
    rep = report_from_masks(pred, gt, ap=0.5)
    assert rep.counts == confusion(pred, gt)
    assert rep.jaccard == jaccard(pred, gt)
    assert rep.average_precision == 0.5
    row = rep.csv_row()
    assert len(row.split(",")) == len(MetricsReport.CSV_HEADER.split(","))
    assert float(row.split(",")[0]) == pytest.approx(rep.jaccard, abs=1e-6)


def test_evaluate_full_same_dims_equals_direct_scoring():
    rng = np.random.default_rng(8)
    dims = (8, 8, 4)
    prob = Volume(dims, rng.uniform(size=(4, 8, 8)).astype(np.float32))
    gt = MaskVolume(dims, (rng.uniform(size=(4, 8, 8)) > 0.5).astype(np.float32))
    rep = evaluate_full(prob, gt, dims)
    # identity upscale is bit exact, so the report must match direct scoring
    assert rep.average_precision == pytest.approx(average_precision(prob, gt), abs=1e-12)
    hard = MaskVolume(dims, (prob.voxels >= 0.5).astype(np.float32))
    assert rep.jaccard == pytest.approx(jaccard(hard, gt), abs=1e-12)


def test_evaluate_full_upscales_to_gt_resolution():
    rng = np.random.default_rng(9)
    small = Volume((8, 8, 4), rng.uniform(0.05, 0.95, size=(4, 8, 8)).astype(np.float32))
    full_dims = (16, 16, 8)
    upscaled = resample_trilinear(small, full_dims)
    gt = MaskVolume(full_dims, (upscaled.voxels >= 0.5).astype(np.float32))
    rep = evaluate_full(small, gt, full_dims)
    assert rep.jaccard == 1.0 and rep.absolute_volume_difference == 0
    with pytest.raises(ValueError, match="dims"):
        evaluate_full(small, gt, (16, 16, 9))
