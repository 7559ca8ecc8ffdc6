"""Temporary EMA teachers: schedule, updates and pseudo-labelling."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .model import predict_logits
from .tensor import ParamSet, ShapeError, softmax

POLICIES = ("round_robin", "ensemble")


def active_teacher(epoch: int, n_teachers: int) -> int:
    if n_teachers < 1:
        raise ValueError("need at least one teacher")
    return epoch % n_teachers


def alpha_at(step: int, alpha_max: float = 0.99) -> float:
    """Warm-up smoothing coefficient min(1 - 1/(step + 1), alpha_max)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return min(1.0 - 1.0 / (step + 1), alpha_max)


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> ParamSet:
    """In place: theta_t <- alpha * theta_t + (1 - alpha) * theta_s."""
    if not teacher.same_structure(student):
        raise ShapeError("teacher and student parameter structures differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    for t, s in zip(teacher.values(), student.values()):
        if alpha == 0.0:
            t.data = s.data.copy()
        else:
            mixed = alpha * t.data.astype(np.float64) + (1.0 - alpha) * s.data.astype(np.float64)
            t.data = mixed.astype(t.dtype)
    return teacher


def hard_labels(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax (first index wins ties) and its probability."""
    labels = probs.argmax(axis=1)
    conf = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
    return labels.astype(np.int64), conf


class TeacherBank:
    """``n`` teacher parameter sets, each with its own EMA update counter.

    Teachers start as copies of the student. Only the teacher passed to
    :meth:`update` changes, so inactive teachers stay frozen.
    """

    def __init__(self, student: ParamSet, n_teachers: int, policy: str = "round_robin",
                 alpha_max: float = 0.99):
        if n_teachers < 1:
            raise ValueError("need at least one teacher")
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
        self.teachers = [student.copy() for _ in range(n_teachers)]
        self.counters = [0] * n_teachers
        self.policy = policy
        self.alpha_max = alpha_max

    def __len__(self) -> int:
        return len(self.teachers)

    def active(self, epoch: int) -> int:
        return active_teacher(epoch, len(self.teachers))

    def update(self, index: int, student: ParamSet) -> float:
        alpha = alpha_at(self.counters[index], self.alpha_max)
        ema_update(self.teachers[index], student, alpha)
        self.counters[index] += 1
        return alpha

    def probs(self, images: np.ndarray, epoch: int) -> np.ndarray:
        """Softmax output used for supervision in ``epoch``."""
        if self.policy == "ensemble":
            return ensemble_probs([predict_logits(t, images) for t in self.teachers])
        return softmax(predict_logits(self.teachers[self.active(epoch)], images))

    def pseudo_label(self, images: np.ndarray, epoch: int,
                     threshold: Optional[float] = None, ignore_label: int = 255):
        labels, conf = hard_labels(self.probs(images, epoch))
        if threshold:
            labels = np.where(conf >= threshold, labels, ignore_label)
        return labels, conf


def ensemble_probs(logits_per_teacher) -> np.ndarray:
    """Equal-weight mean of the teachers' softmax outputs."""
    probs = [softmax(l) for l in logits_per_teacher]
    return np.mean(probs, axis=0)
