"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import ShapeError

UNLABELED = -1


def check_images(X, channels: Optional[int] = None) -> np.ndarray:
    """Return ``X`` as a finite float32 array [N, C, H, W]; a single [C, H, W] image is promoted."""
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"images must be [N, C, H, W], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {X.shape[1]}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


def check_masks(y, images: np.ndarray, num_classes: Optional[int] = None,
                ignore_label: int = 255, allow_unlabeled: bool = False) -> np.ndarray:
    """Return ``y`` as int64 [N, H, W] matching ``images``.

    Values must be class ids, ``ignore_label`` or, with ``allow_unlabeled``,
    ``-1`` across a whole mask to mark an unlabeled sample.
    """
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (images.shape[0],) + images.shape[2:]:
        raise ShapeError(f"masks {y.shape} do not match images {images.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.isfinite(y)) or not np.all(y == np.round(y)):
            raise ValueError("masks must hold integer class ids")
    y = y.astype(np.int64)
    unlabeled = np.all(y == UNLABELED, axis=(1, 2))
    if np.any(y == UNLABELED) and not np.array_equal(np.any(y == UNLABELED, axis=(1, 2)), unlabeled):
        raise ValueError("-1 marks an unlabeled sample and must fill its whole mask")
    if unlabeled.any() and not allow_unlabeled:
        raise ValueError("unlabeled samples (-1 masks) are not accepted here")
    labeled = y[~unlabeled]
    valid = labeled[labeled != ignore_label]
    if valid.size and valid.min() < 0:
        raise ValueError(f"negative class id {int(valid.min())}")
    if num_classes is not None and valid.size and valid.max() >= num_classes:
        raise ValueError(f"class id {int(valid.max())} out of range for {num_classes} classes")
    return y


def unlabeled_rows(y: np.ndarray) -> np.ndarray:
    return np.all(y == UNLABELED, axis=(1, 2))
