"""Segmentation metrics, hubness diagnostics and Grounded Compositional
Recognition (GCR) scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ConfusionAccumulator:
    """Per-class TP / FP / FN counts; accumulation is a plain integer sum."""

    def __init__(self, n_classes: int):
        self.n_classes = int(n_classes)
        self.tp = np.zeros(self.n_classes, dtype=np.int64)
        self.fp = np.zeros(self.n_classes, dtype=np.int64)
        self.fn = np.zeros(self.n_classes, dtype=np.int64)

    def add(self, pred, gt) -> "ConfusionAccumulator":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ValueError("pred and gt lengths differ")
        c = self.n_classes
        hit = pred == gt
        tp = np.bincount(gt[hit], minlength=c)
        self.tp += tp
        self.fp += np.bincount(pred, minlength=c)[:c] - tp
        self.fn += np.bincount(gt, minlength=c)[:c] - tp
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ValueError("class counts differ")
        out = ConfusionAccumulator(self.n_classes)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.fn = self.fn + other.fn
        return out

    def __eq__(self, other):
        return (isinstance(other, ConfusionAccumulator) and self.n_classes == other.n_classes
                and np.array_equal(self.tp, other.tp) and np.array_equal(self.fp, other.fp)
                and np.array_equal(self.fn, other.fn))


def pointwise_accuracy(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt lengths differ")
    if pred.size == 0:
        raise ValueError("no points to score")
    return float(np.mean(pred == gt))


def class_average_accuracy(pred, gt, n_classes: int) -> float:
    """Mean per-class recall over the classes present in ``gt``."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt lengths differ")
    support = np.bincount(gt, minlength=n_classes)
    present = support > 0
    if not present.any():
        raise ValueError("no class present in ground truth")
    hits = np.bincount(gt[pred == gt], minlength=n_classes)
    return float(np.mean(hits[present] / support[present]))


def miou(acc: ConfusionAccumulator):
    """Per-class IoU (NaN where the union is empty) and their mean over defined classes."""
    union = acc.tp + acc.fp + acc.fn
    defined = union > 0
    if not defined.any():
        raise ValueError("every class has an empty union")
    per_class = np.full(acc.n_classes, np.nan)
    per_class[defined] = acc.tp[defined] / union[defined]
    return per_class, float(per_class[defined].mean())


def hubness_stats(pref):
    p = np.asarray(pref, dtype=np.float64)
    nz = p[p > 0]
    return float(p.var()), float(p.max()), float(-(nz * np.log(nz)).sum())


@dataclass(frozen=True)
class ShapePrediction:
    shape_class: int
    part_labels: np.ndarray
    material_labels: np.ndarray


@dataclass(frozen=True)
class GCRResult:
    shape_acc: float
    value: float
    value_all: float
    grounded_value: float
    grounded_value_all: float

    def as_dict(self) -> dict:
        return {"shape_acc": self.shape_acc, "value": self.value, "value_all": self.value_all,
                "grounded_value": self.grounded_value,
                "grounded_value_all": self.grounded_value_all}


class EmptyShapeError(ValueError):
    pass


def shape_pair_scores(pred: ShapePrediction, gt, iou_threshold: float = 0.5):
    """Per-GT-part (value_correct, grounded_correct) boolean arrays for one shape."""
    gp = np.asarray(gt.part_labels, dtype=np.int64)
    gm = np.asarray(gt.material_labels, dtype=np.int64)
    pp = np.asarray(pred.part_labels, dtype=np.int64)
    pm = np.asarray(pred.material_labels, dtype=np.int64)
    if len(pp) != len(gp) or len(pm) != len(gm):
        raise ValueError("prediction and ground-truth point counts differ")
    parts = np.unique(gp)
    if len(parts) == 0:
        raise EmptyShapeError("shape has no ground-truth parts")
    n_part = int(max(gp.max(), pp.max() if len(pp) else 0)) + 1
    n_mat = int(max(gm.max(), pm.max() if len(pm) else 0)) + 1
    gt_pm = np.zeros((n_part, n_mat), dtype=np.int64)
    np.add.at(gt_pm, (gp, gm), 1)
    pred_pm = np.zeros((n_part, n_mat), dtype=np.int64)
    np.add.at(pred_pm, (gp, pm), 1)
    # majority votes; argmax breaks ties toward the lowest material id
    gt_mat = gt_pm[parts].argmax(axis=1)
    pred_mat = pred_pm[parts].argmax(axis=1)
    value_ok = gt_mat == pred_mat

    inter = np.bincount(gp[pp == gp], minlength=n_part)[parts]
    union = (np.bincount(gp, minlength=n_part)[parts]
             + np.bincount(pp, minlength=n_part)[parts] - inter)
    iou = inter / union
    grounded_ok = value_ok & (iou >= iou_threshold)
    return value_ok, grounded_ok


def gcr_evaluate(predictions: Sequence[ShapePrediction], ground_truth: Sequence,
                 iou_threshold: float = 0.5) -> GCRResult:
    """Shape accuracy, Value, Value-All and grounded variants (macro over shapes)."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must lie in (0, 1]")
    if len(predictions) != len(ground_truth):
        raise ValueError("one prediction per ground-truth shape is required")
    if not predictions:
        raise ValueError("nothing to evaluate")
    shape_hit, value, value_all, gvalue, gvalue_all = [], [], [], [], []
    for i, (pred, gt) in enumerate(zip(predictions, ground_truth)):
        if len(gt.part_labels) == 0:
            raise EmptyShapeError(f"shape {i} has no ground-truth parts")
        v, g = shape_pair_scores(pred, gt, iou_threshold)
        shape_hit.append(int(pred.shape_class) == int(gt.shape_class))
        value.append(v.mean())
        value_all.append(v.all())
        gvalue.append(g.mean())
        gvalue_all.append(g.all())
    return GCRResult(float(np.mean(shape_hit)), float(np.mean(value)), float(np.mean(value_all)),
                     float(np.mean(gvalue)), float(np.mean(gvalue_all)))
