"""Confusion-matrix IoU / mIoU and label-map solution-space counting."""
from __future__ import annotations

import numpy as np

from .autodiff import ContractError, no_grad


class ConfusionMatrix:
    """``counts[i, j]`` = pixels with ground truth ``i`` predicted as ``j``."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ContractError("num_classes must be positive")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices of different size")
        self.counts += other.counts
        self.ignored += other.ignored
        return self


def confusion_accumulate(cm: ConfusionMatrix, pred, gt, ignore_index: int | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    k = cm.num_classes
    keep = np.ones(gt.shape, dtype=bool) if ignore_index is None else gt != ignore_index
    cm.ignored += int(gt.size - keep.sum())
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= k or p.max() >= k or g.min() < 0 or p.min() < 0):
        raise ContractError(f"class index out of range for K={k}")
    cm.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU (``None`` where a class is in neither gt nor prediction) and their mean."""
    diag = np.diag(cm.counts)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - diag
    per_class: list[float | None] = []
    for c in range(cm.num_classes):
        per_class.append(None if union[c] == 0 else float(diag[c]) / float(union[c]))
    present = [v for v in per_class if v is not None]
    if not present:
        raise ContractError("mIoU undefined: no class present in ground truth or prediction")
    return per_class, float(sum(present) / len(present))


def predict_dataset(segmentor, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Hard label maps for a stack of images, evaluated in fixed-order batches."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = segmentor.forward(images[start : start + batch_size])
            out.append(np.argmax(logits.data, axis=-1).astype(np.uint8))
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + images.shape[1:3], dtype=np.uint8)


def evaluate_model_miou(segmentor, dataset, ignore_index: int | None = None) -> float:
    """One confusion matrix over the whole dataset, then mIoU."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = predict_dataset(segmentor, dataset.images)
    cm = ConfusionMatrix(dataset.num_classes)
    confusion_accumulate(cm, preds, dataset.labels, ignore_index)
    return miou(cm)[1]


def pixel_accuracy(segmentor, dataset) -> float:
    preds = predict_dataset(segmentor, dataset.images)
    return float((preds == dataset.labels).mean())


def solution_space_size(num_classes: int, num_pixels: int, independent: bool = False) -> int:
    """Number of distinct label maps: ``K**N`` jointly, ``K*N`` under pixel independence."""
    if num_classes < 1 or num_pixels < 1:
        raise ContractError("class and pixel counts must be positive")
    return num_classes * num_pixels if independent else num_classes**num_pixels
