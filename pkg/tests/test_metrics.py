import math

import numpy as np
import pytest

from oracles import brute_gcr, random_gcr_instance
from vilhub.data import LabeledShape, PointCloud
from vilhub.metrics import (ConfusionAccumulator, EmptyShapeError, ShapePrediction,
                            class_average_accuracy, gcr_evaluate, hubness_stats, miou,
                            pointwise_accuracy)


def shape(parts, mats, cls=0):
    n = len(parts)
    return LabeledShape(PointCloud(np.zeros((n, 3)), np.zeros((n, 3))), np.array(parts),
                        np.array(mats), cls)


def test_pointwise_accuracy_examples():
    assert pointwise_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert pointwise_accuracy([0, 0], [1, 1]) == 0.0
    assert pointwise_accuracy([0, 1, 2, 9], [0, 1, 2, 3]) == 0.75
    with pytest.raises(ValueError):
        pointwise_accuracy([0, 1], [0])


def test_class_average_accuracy_examples():
    assert class_average_accuracy([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert class_average_accuracy([0, 0, 0, 0], [0, 0, 0, 1], 2) == 0.5
    pred, gt = [0, 1, 1, 0], [0, 0, 1, 1]
    assert class_average_accuracy(pred, gt, 2) == pointwise_accuracy(pred, gt)
    with pytest.raises(ValueError):
        class_average_accuracy([], [], 2)


def test_miou_examples():
    _, m = miou(ConfusionAccumulator(3).add([0, 1, 2, 2], [0, 1, 2, 2]))
    assert m == 1.0
    # class 1 predicted on points 1,2,3 and present on 2,3,4
    pred = np.array([0, 1, 1, 1, 0])
    gt = np.array([0, 0, 1, 1, 1])
    per, _ = miou(ConfusionAccumulator(2).add(pred, gt))
    assert per[1] == 0.5
    per, m = miou(ConfusionAccumulator(4).add([0, 1], [0, 1]))
    assert np.isnan(per[2]) and np.isnan(per[3]) and m == 1.0
    with pytest.raises(ValueError):
        miou(ConfusionAccumulator(3))


def test_miou_relabel_invariance(rng):
    pred, gt = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
    perm = rng.permutation(5)
    _, a = miou(ConfusionAccumulator(5).add(pred, gt))
    _, b = miou(ConfusionAccumulator(5).add(perm[pred], perm[gt]))
    assert a == pytest.approx(b, abs=1e-15)


def test_accumulator_merge_order_independent(rng):
    shards = [(rng.integers(0, 6, 30), rng.integers(0, 6, 30)) for _ in range(5)]
    accs = [ConfusionAccumulator(6).add(p, g) for p, g in shards]
    whole = ConfusionAccumulator(6).add(np.concatenate([p for p, _ in shards]),
                                        np.concatenate([g for _, g in shards]))
    left = accs[0].merge(accs[1]).merge(accs[2]).merge(accs[3]).merge(accs[4])
    right = accs[4].merge(accs[2].merge(accs[0])).merge(accs[3].merge(accs[1]))
    assert left == whole and right == whole
    assert (whole.tp >= 0).all() and (whole.fp >= 0).all() and (whole.fn >= 0).all()
    with pytest.raises(ValueError):
        accs[0].merge(ConfusionAccumulator(5))


def test_hubness_stats_examples():
    var, mx, ent = hubness_stats([0.25] * 4)
    assert var == 0.0 and mx == 0.25 and ent == pytest.approx(math.log(4), abs=1e-15)
    _, mx, ent = hubness_stats([0.0, 1.0, 0.0])
    assert mx == 1.0 and ent == 0.0
    assert hubness_stats([0.5, 0.5, 0, 0])[2] == pytest.approx(math.log(2), abs=1e-15)


def test_gcr_perfect():
    gt = [shape([0, 0, 1, 2], [1, 1, 0, 2], 1), shape([3, 3], [0, 0], 2)]
    preds = [ShapePrediction(s.shape_class, s.part_labels, s.material_labels) for s in gt]
    assert gcr_evaluate(preds, gt).as_dict() == dict.fromkeys(
        ["shape_acc", "value", "value_all", "grounded_value", "grounded_value_all"], 1.0)


def test_gcr_worked_example():
    # part 0 on points 0..4 (material 1), part 1 on points 5..9 (material 2)
    gt = shape([0] * 5 + [1] * 5, [1] * 5 + [2] * 5)
    # part 0 predicted only on points 0,1: IoU 2/5 = 0.4; part 1 exact: IoU 1.0
    pp = np.array([0, 0, 5, 5, 5, 1, 1, 1, 1, 1])
    r = gcr_evaluate([ShapePrediction(0, pp, gt.material_labels.copy())], [gt])
    assert (r.value, r.grounded_value, r.value_all, r.grounded_value_all) == (1.0, 0.5, 1.0, 0.0)


def test_gcr_correct_materials_shuffled_parts():
    gt = shape([0] * 4 + [1] * 4 + [2] * 4, [0] * 4 + [1] * 4 + [2] * 4)
    pp = np.array([1] * 4 + [2] * 4 + [0] * 4)
    r = gcr_evaluate([ShapePrediction(0, pp, gt.material_labels.copy())], [gt])
    assert r.value == 1.0 and r.grounded_value == 0.0


def test_gcr_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    inside = 0
    for _ in range(200):
        preds, gts = random_gcr_instance(rng)
        for thr in (0.5, float(rng.uniform(0.05, 1.0))):
            r = gcr_evaluate(preds, gts, thr)
            fast = (r.shape_acc, r.value, r.value_all, r.grounded_value, r.grounded_value_all)
            assert fast == brute_gcr(preds, gts, thr)
            assert r.grounded_value <= r.value and r.grounded_value_all <= r.value_all
            assert r.value_all <= r.value and r.grounded_value_all <= r.grounded_value
            inside += 0 < r.value < 1
    assert inside > 50


def test_gcr_threshold_near_zero_degenerates(rng):
    for _ in range(20):
        preds, gts = random_gcr_instance(rng)
        r = gcr_evaluate(preds, gts, 1e-9)
        intersects = all(
            np.any((p.part_labels == q) & (g.part_labels == q))
            for p, g in zip(preds, gts) for q in np.unique(g.part_labels))
        if intersects:
            assert (r.grounded_value, r.grounded_value_all) == (r.value, r.value_all)


def test_gcr_errors():
    gt = shape([0, 1], [0, 0])
    pred = ShapePrediction(0, np.array([0, 1]), np.array([0, 0]))
    for thr in (0.0, -0.1, 1.01):
        with pytest.raises(ValueError):
            gcr_evaluate([pred], [gt], thr)
    assert gcr_evaluate([pred], [gt], 1.0).grounded_value == 1.0
    with pytest.raises(ValueError):
        gcr_evaluate([pred], [gt, gt])
    with pytest.raises(ValueError):
        gcr_evaluate([ShapePrediction(0, np.array([0]), np.array([0]))], [gt])
    empty = LabeledShape.__new__(LabeledShape)
    object.__setattr__(empty, "part_labels", np.zeros(0, dtype=int))
    object.__setattr__(empty, "material_labels", np.zeros(0, dtype=int))
    object.__setattr__(empty, "shape_class", 0)
    with pytest.raises(EmptyShapeError, match="shape 1"):
        gcr_evaluate([pred, ShapePrediction(0, np.zeros(0, int), np.zeros(0, int))], [gt, empty])
