"""Segmentation metrics on class label maps (0 = background).

IoU-family aggregates follow the surgical-instrument conventions:

* ``Ch_IoU``  - per frame, mean IoU over classes present in the ground truth,
  then mean over frames.
* ``ISI_IoU`` - per frame, mean IoU over classes present in prediction or
  ground truth, then mean over frames.
* ``mcIoU``   - per class, mean IoU over frames where it is defined, then mean
  over classes.

Undefined values (empty unions, frames without any relevant class) are
excluded from every average rather than scored as 0 or 1.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DataError

_CROSS = ndimage.generate_binary_structure(2, 1)


def per_class_iou(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """IoU of class ``c``; NaN when the class is absent from both maps."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ArgumentError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p, g = pred == c, gt == c
    union = np.count_nonzero(p | g)
    if union == 0:
        return math.nan
    return np.count_nonzero(p & g) / union


def per_class_dice(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ArgumentError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p, g = pred == c, gt == c
    total = np.count_nonzero(p) + np.count_nonzero(g)
    if total == 0:
        return math.nan
    return 2.0 * np.count_nonzero(p & g) / total


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _check(preds, gts):
    if len(preds) != len(gts):
        raise DataError("prediction and ground-truth frame counts differ")
    if len(preds) == 0:
        raise DataError("no frames to evaluate")


def _classes(preds, gts, num_classes):
    if num_classes is None:
        num_classes = int(max(max(int(np.max(p)) for p in preds), max(int(np.max(g)) for g in gts)))
    return list(range(1, num_classes + 1))


def _aggregate(preds, gts, num_classes, score):
    """Frame-level (GT classes), frame-level (present classes), and class-mean aggregates."""
    _check(preds, gts)
    classes = _classes(preds, gts, num_classes)
    ch_frames, isi_frames = [], []
    per_class = {c: [] for c in classes}
    for pred, gt in zip(preds, gts):
        gt_present = {c for c in classes if np.any(gt == c)}
        any_present = gt_present | {c for c in classes if np.any(pred == c)}
        scores = {c: score(pred, gt, c) for c in any_present}
        if gt_present:
            ch_frames.append(np.mean([scores[c] for c in sorted(gt_present)]))
        if any_present:
            isi_frames.append(np.mean([scores[c] for c in sorted(any_present)]))
        for c, s in scores.items():
            per_class[c].append(s)
    class_means = {c: (float(np.mean(v)) if v else math.nan) for c, v in per_class.items()}
    return _nanmean(ch_frames), _nanmean(isi_frames), _nanmean(class_means.values()), class_means


def dataset_ious(preds, gts, num_classes: int | None = None):
    """Return ``(Ch_IoU, ISI_IoU, mcIoU)`` over aligned frame lists."""
    ch, isi, mc, _ = _aggregate(preds, gts, num_classes, per_class_iou)
    return ch, isi, mc


def dice_scores(preds, gts, num_classes: int | None = None):
    """Return ``(DSC, mcD)``: Dice aggregated like Ch_IoU and mcIoU."""
    dsc, _, mcd, _ = _aggregate(preds, gts, num_classes, per_class_dice)
    return dsc, mcd


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def surface_distances(pred_mask: np.ndarray, gt_mask: np.ndarray):
    """Hausdorff and average symmetric surface distance between two masks.

    Returns ``None`` when either mask is empty (the pair is undefined).
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ArgumentError("mask shapes differ")
    if not pred_mask.any() or not gt_mask.any():
        return None
    bp, bg = boundary(pred_mask), boundary(gt_mask)
    d_to_g = ndimage.distance_transform_edt(~bg)[bp]
    d_to_p = ndimage.distance_transform_edt(~bp)[bg]
    hd = float(max(d_to_g.max(), d_to_p.max()))
    asd = float(0.5 * (d_to_g.mean() + d_to_p.mean()))
    return hd, asd


def evaluate(preds, gts, num_classes: int | None = None) -> dict:
    """Full metric report as written to ``metrics.json``."""
    ch, isi, mc, per_class = _aggregate(preds, gts, num_classes, per_class_iou)
    dsc, mcd = dice_scores(preds, gts, num_classes)
    classes = _classes(preds, gts, num_classes)
    hds, asds, excluded = [], [], 0
    for pred, gt in zip(preds, gts):
        for c in classes:
            p, g = pred == c, gt == c
            if not p.any() and not g.any():
                continue
            res = surface_distances(p, g)
            if res is None:
                excluded += 1
                continue
            hds.append(res[0])
            asds.append(res[1])
    return {
        "Ch_IoU": ch,
        "ISI_IoU": isi,
        "mcIoU": mc,
        "per_class": {str(c): v for c, v in per_class.items()},
        "DSC": dsc,
        "mcD": mcd,
        "HD": float(np.mean(hds)) if hds else math.nan,
        "ASD": float(np.mean(asds)) if asds else math.nan,
        "frames": len(preds),
        "excluded_pairs": excluded,
    }
