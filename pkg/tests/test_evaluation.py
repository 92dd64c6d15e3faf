import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from domino.data import LabeledScene
from domino.errors import ContractViolation, DegenerateInputError
from domino.evaluation import (
    ConfusionMatrix,
    evaluate_dataset,
    mean_iou,
    merge_confusion,
    miou_percent,
    per_class_iou,
    update_confusion,
)


def brute_force_miou(preds, gts, k):
    """Per-pixel tally with Python ints; classes absent from both maps are skipped."""
    inter = [0] * k
    union = [0] * k
    for pred, gt in zip(preds, gts):
        for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
            for c in range(k):
                a, b = p == c, g == c
                inter[c] += a and b
                union[c] += a or b
    ious = [inter[c] / union[c] for c in range(k) if union[c] > 0]
    return sum(ious) / len(ious), inter, union


def test_perfect_prediction_is_diagonal():
    cm = ConfusionMatrix(3)
    labels = np.array([[0, 1], [2, 2]])
    update_confusion(cm, labels, labels)
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    assert cm.total == 4


def test_empty_update_is_identity():
    cm = ConfusionMatrix(3)
    update_confusion(cm, np.zeros((0,), int), np.zeros((0,), int))
    assert cm.total == 0


def test_hand_case():
    cm = ConfusionMatrix(2)
    update_confusion(cm, [0, 1, 1, 1], [0, 0, 1, 1])
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    iou = per_class_iou(cm)
    assert iou[0] == pytest.approx(1 / 2)
    assert iou[1] == pytest.approx(2 / 3)


def test_out_of_range_and_shape_errors():
    cm = ConfusionMatrix(2)
    with pytest.raises(ContractViolation):
        cm.update([0, 2], [0, 1])
    with pytest.raises(ContractViolation):
        cm.update([0, 1, 1], [0, 1])
    with pytest.raises(ContractViolation):
        merge_confusion(ConfusionMatrix(2), ConfusionMatrix(3))


def test_ignore_index():
    cm = ConfusionMatrix(2, ignore_index=255)
    cm.update([0, 1, 1], [0, 255, 1])
    assert cm.total == 2


def test_undefined_classes_excluded():
    cm = ConfusionMatrix(3)
    cm.update([0, 0, 1], [0, 0, 1])
    iou = per_class_iou(cm)
    assert math.isnan(iou[2])
    assert cm.miou() == 1.0
    cm2 = ConfusionMatrix(3)
    cm2.update([2, 0], [0, 0])  # class 2 predicted but absent from ground truth
    assert per_class_iou(cm2)[2] == 0.0


def _random_cm(rng, k=4, n=50):
    cm = ConfusionMatrix(k)
    cm.update(rng.integers(0, k, n), rng.integers(0, k, n))
    return cm


def test_merge_properties():
    rng = np.random.default_rng(0)
    a, b, c = (_random_cm(rng) for _ in range(3))
    assert np.array_equal(merge_confusion(a, ConfusionMatrix(4)).counts, a.counts)
    assert np.array_equal(merge_confusion(a, b).counts, merge_confusion(b, a).counts)
    assert np.array_equal(merge_confusion(merge_confusion(a, b), c).counts,
                          merge_confusion(a, merge_confusion(b, c)).counts)


def test_sharded_equals_sequential():
    rng = np.random.default_rng(1)
    pairs = [(rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))) for _ in range(12)]
    seq = ConfusionMatrix(4)
    for p, g in pairs:
        seq.update(p, g)
    idx = rng.permutation(12)
    shards = [ConfusionMatrix(4) for _ in range(3)]
    for j, i in enumerate(idx):
        shards[j % 3].update(*pairs[i])
    merged = merge_confusion(merge_confusion(shards[0], shards[1]), shards[2])
    assert np.array_equal(merged.counts, seq.counts)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 5))
def test_iou_bounds_and_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, k, (5, 7)), rng.integers(0, k, (5, 7))
    cm = ConfusionMatrix(k).update(pred, gt)
    iou = per_class_iou(cm)
    defined = iou[~np.isnan(iou)]
    assert np.all((defined >= 0) & (defined <= 1))
    expected, inter, union = brute_force_miou([pred], [gt], k)
    assert cm.miou() == pytest.approx(expected, abs=1e-12)
    assert np.diag(cm.counts).tolist() == inter


@pytest.mark.parametrize(
    "source,target,expected",
    [(76.82, 62.50, 81.36), (76.13, 65.00, 85.38), (50.0, 50.0, 100.00)],
)
def test_miou_percent_rows(source, target, expected):
    assert miou_percent(source, target) == expected


def test_miou_percent_rejects_nonpositive_source():
    with pytest.raises(DegenerateInputError):
        miou_percent(0.0, 1.0)


def test_half_even_rounding():
    assert miou_percent(100.0, 12.345) == 12.34
    assert miou_percent(100.0, 12.355) == 12.36


class _LookupModel(torch.nn.Module):
    """Predicts a fixed label map per image, keyed by the image's first pixel."""

    requires_domain_embedding = False

    def __init__(self, table, k):
        super().__init__()
        self.table = table
        self.num_classes = k

    def forward(self, images, w=None):
        out = []
        for img in images:
            labels = self.table[round(float(img[0, 0, 0]) * 1000)]
            out.append(torch.nn.functional.one_hot(torch.as_tensor(labels).long(), self.num_classes).permute(2, 0, 1).float())
        return torch.stack(out)


def _dataset(n=10, k=3, seed=0):
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        img = np.full((4, 4, 3), i / 1000, dtype=np.float32)
        scenes.append(LabeledScene(img, rng.integers(0, k, (4, 4)).astype(np.uint8), seed=i))
    return scenes


def test_ground_truth_model_scores_one():
    ds = _dataset()
    model = _LookupModel({i: s.labels for i, s in enumerate(ds)}, 3)
    assert evaluate_dataset(model, ds).miou == 1.0


def test_order_independence():
    ds = _dataset(seed=2)
    rng = np.random.default_rng(5)
    model = _LookupModel({i: rng.integers(0, 3, (4, 4)) for i in range(len(ds))}, 3)
    shuffled = ds[:]
    random.Random(0).shuffle(shuffled)
    assert evaluate_dataset(model, ds, batch_size=3) == evaluate_dataset(model, shuffled, batch_size=4)


def test_constant_predictor_matches_tally():
    rng = np.random.default_rng(3)
    ds = []
    for i in range(6):
        labels = np.array([0, 1] * 8, dtype=np.uint8).reshape(4, 4)
        ds.append(LabeledScene(np.full((4, 4, 3), i / 1000, dtype=np.float32), rng.permutation(labels.ravel()).reshape(4, 4)))
    model = _LookupModel({i: np.zeros((4, 4), int) for i in range(6)}, 2)
    report = evaluate_dataset(model, ds)
    expected, _, _ = brute_force_miou([np.zeros((4, 4))] * 6, [s.labels for s in ds], 2)
    assert report.miou == expected == pytest.approx(0.25)
