"""Training losses, segmentation metrics and teacher/student diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, add, pixel_cross_entropy, scale, soft_cross_entropy

IGNORE_LABEL = 255


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float = 1.0
    lambda_c: float = 1.0
    labeled: float = 2.0

    def __post_init__(self):
        if min(self.lambda_u, self.lambda_c, self.labeled) < 0:
            raise ValueError("loss weights must be non-negative")


def sup_loss(logits: Tensor, labels, ignore_label: int = IGNORE_LABEL) -> Tensor:
    if logits.shape[0] == 0:
        raise ValueError("empty labeled batch")
    return pixel_cross_entropy(logits, labels, ignore_label)


def unsup_loss(logits: Tensor, pseudo_labels, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Hard pseudo-labels [N, H, W] use pixel cross-entropy; soft maps [N, C, H, W] the soft variant."""
    pseudo_labels = np.asarray(pseudo_labels)
    if pseudo_labels.ndim == 4:
        return soft_cross_entropy(logits, pseudo_labels)
    if pseudo_labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"pseudo-labels {pseudo_labels.shape} do not match logits {logits.shape}")
    return pixel_cross_entropy(logits, pseudo_labels, ignore_label)


def cons_loss(sub_model_logits: Tensor, teacher_labels, ignore_label: int = IGNORE_LABEL) -> Tensor:
    return unsup_loss(sub_model_logits, teacher_labels, ignore_label)


def total_loss(sup: Tensor, unsup: Optional[Tensor], cons: Optional[Tensor], weights: LossWeights) -> Tensor:
    """labeled * L_sup + lambda_u * L_unsup + lambda_c * L_cons; absent parts count as zero."""
    total = scale(sup, weights.labeled)
    if unsup is not None:
        total = add(total, scale(unsup, weights.lambda_u))
    if cons is not None:
        total = add(total, scale(cons, weights.lambda_c))
    return total


# ---------------------------------------------------------------- metrics

class ConfusionMatrix:
    """Counts indexed [true, predicted]; ``ignore_label`` pixels are skipped."""

    def __init__(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, target) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel()
        target = np.asarray(target).ravel()
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        keep = target != self.ignore_label
        c = self.num_classes
        self.counts += np.bincount(c * target[keep].astype(np.int64) + pred[keep],
                                   minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_label)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the union is empty) and their mean over defined classes."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou, float(np.nanmean(iou))


def prediction_distance(teacher_probs, student_probs) -> float:
    """Mean squared difference between two softmax maps."""
    a = np.asarray(teacher_probs, dtype=np.float64)
    b = np.asarray(student_probs, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def class_iou_divergence(iou_a: Sequence[float], iou_b: Sequence[float], k: int = 5,
                         class_names: Optional[Sequence[str]] = None) -> list[tuple]:
    """Top-``k`` classes by |IoU_a - IoU_b| as (class, iou_a, iou_b, delta), largest first."""
    a = np.asarray(iou_a, dtype=np.float64)
    b = np.asarray(iou_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"class counts differ: {a.size} vs {b.size}")
    delta = np.abs(np.nan_to_num(a) - np.nan_to_num(b))
    order = np.argsort(-delta, kind="stable")[:k]
    names = class_names if class_names is not None else list(range(a.size))
    return [(names[i], float(a[i]), float(b[i]), float(delta[i])) for i in order]


def window_stats(values: Sequence[float], width: int = 5) -> list[tuple[int, int, float, float]]:
    """Contiguous windows of ``width`` epochs: (first, last, mean, std), 1-based and inclusive.

    A trailing partial window is kept. Std is the population std.
    """
    vals = np.asarray(values, dtype=np.float64)
    if width < 1:
        raise ValueError("window width must be >= 1")
    out = []
    for start in range(0, vals.size, width):
        chunk = vals[start:start + width]
        out.append((start + 1, start + chunk.size, float(chunk.mean()), float(chunk.std())))
    return out
