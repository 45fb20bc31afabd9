import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loadseg.autodiff import ContractError
from loadseg.data import Dataset, generate_shapes_dataset
from loadseg.metrics import (
    ConfusionMatrix,
    confusion_accumulate,
    evaluate_model_miou,
    miou,
    solution_space_size,
)
from loadseg.models import SegmentorSpec, oracle_segmentor


def brute_force_miou(pred, gt, k):
    """Per-class IoU from explicit pixel-coordinate sets."""
    ious = []
    for c in range(k):
        p = {idx for idx in np.ndindex(pred.shape) if pred[idx] == c}
        g = {idx for idx in np.ndindex(gt.shape) if gt[idx] == c}
        union = p | g
        if union:
            ious.append(len(p & g) / len(union))
    return sum(ious) / len(ious)


def test_diagonal_accumulation():
    cm = confusion_accumulate(ConfusionMatrix(3), np.full(4, 2), np.full(4, 2))
    assert cm.counts[2, 2] == 4 and cm.total == 4


def test_off_diagonal_count():
    cm = confusion_accumulate(ConfusionMatrix(2), np.array([1, 1]), np.array([0, 1]))
    assert cm.counts[0, 1] == 1 and cm.counts[1, 1] == 1 and cm.total == 2


def test_ignore_index_excluded():
    cm = confusion_accumulate(ConfusionMatrix(2), np.array([0, 1, 1]), np.array([0, 255, 255]), ignore_index=255)
    assert cm.total == 1 and cm.ignored == 2


def test_shape_mismatch_rejected():
    with pytest.raises(ContractError):
        confusion_accumulate(ConfusionMatrix(2), np.zeros(3), np.zeros(4))


def test_miou_hand_example():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[2, 1], [1, 2]]
    per_class, mean = miou(cm)
    assert per_class == [0.5, 0.5] and mean == 0.5


def test_absent_class_excluded_from_mean():
    cm = confusion_accumulate(ConfusionMatrix(3), np.array([0, 1]), np.array([0, 1]))
    per_class, mean = miou(cm)
    assert per_class == [1.0, 1.0, None] and mean == 1.0


def test_all_classes_absent_is_error():
    with pytest.raises(ContractError):
        miou(ConfusionMatrix(3))


def test_miou_brute_force_on_random_pairs():
    rng = np.random.default_rng(99)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        pred = rng.integers(0, k, size=(8, 8))
        gt = rng.integers(0, k, size=(8, 8))
        cm = confusion_accumulate(ConfusionMatrix(k), pred, gt)
        assert miou(cm)[1] == brute_force_miou(pred, gt, k)


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_accumulation_order_invariance(seed):
    rng = np.random.default_rng(seed)
    preds = rng.integers(0, 4, size=(5, 6, 6))
    gts = rng.integers(0, 4, size=(5, 6, 6))
    a, b = ConfusionMatrix(4), ConfusionMatrix(4)
    for i in range(5):
        confusion_accumulate(a, preds[i], gts[i])
    for i in rng.permutation(5):
        confusion_accumulate(b, preds[i], gts[i])
    assert np.array_equal(a.counts, b.counts)
    merged = ConfusionMatrix(4)
    for i in range(5):
        merged.merge(confusion_accumulate(ConfusionMatrix(4), preds[i], gts[i]))
    assert np.array_equal(a.counts, merged.counts)


def test_oracle_model_scores_one():
    ds = generate_shapes_dataset(4, 5, 16, 16, 3)
    assert evaluate_model_miou(oracle_segmentor(SegmentorSpec(16, 16, 3)), ds) == 1.0


class _ConstantZero:
    def forward(self, images):
        from loadseg.autodiff import Tensor

        logits = np.zeros(images.shape[:3] + (3,), dtype=np.float32)
        logits[..., 0] = 1.0
        return Tensor(logits)


def test_constant_predictor_matches_pixel_count():
    ds = generate_shapes_dataset(4, 2, 16, 16, 3)
    expected = brute_force_miou(np.zeros_like(ds.labels), ds.labels, 3)
    assert evaluate_model_miou(_ConstantZero(), ds) == expected


def test_empty_dataset_is_error():
    empty = Dataset(np.zeros((0, 8, 8, 3), np.float32), np.zeros((0, 8, 8), np.uint8), 2, 0)
    with pytest.raises(ContractError):
        evaluate_model_miou(_ConstantZero(), empty)


def test_solution_space_examples():
    assert solution_space_size(3, 2) == 9
    assert solution_space_size(3, 2, independent=True) == 6
    assert solution_space_size(7, 1) == 7
    with pytest.raises(ContractError):
        solution_space_size(0, 3)


@given(st.integers(2, 50), st.integers(1, 300))
def test_joint_space_dominates_independent(k, n):
    assert solution_space_size(k, n) >= solution_space_size(k, n, independent=True)
