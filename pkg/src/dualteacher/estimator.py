"""scikit-learn style wrapper around :class:`~dualteacher.engine.Trainer`."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .engine import Trainer, TrainData, evaluate
from .model import predict_logits
from .tensor import softmax
from .validation import check_images, check_masks, unlabeled_rows


class DualTeacherSegmenter(BaseEstimator):
    """Semi-supervised segmenter.

    ``fit(X, y)`` takes images [N, C, H, W] in [0, 1] and masks [N, H, W];
    a mask filled with ``-1`` marks that image as unlabeled. The fitted
    student is used for prediction. Set ``mode="supervised_only"`` to ignore
    the unlabeled images.

    Examples
    --------
    >>> seg = DualTeacherSegmenter(epochs=2).fit(X, y)   # doctest: +SKIP
    >>> seg.predict(X[:4]).shape                          # doctest: +SKIP
    (4, 64, 64)
    """

    def __init__(self, mode: str = TrainConfig.mode, aug_pool: str = "classmix,cutmix",
                 epochs: int = TrainConfig.epochs, batch_labeled: int = TrainConfig.batch_labeled,
                 batch_unlabeled: int = TrainConfig.batch_unlabeled, lr: float = TrainConfig.lr,
                 lr_schedule: str = TrainConfig.lr_schedule, weight_decay: float = TrainConfig.weight_decay,
                 momentum: float = TrainConfig.momentum, clip_norm: float = TrainConfig.clip_norm,
                 lambda_u: float = TrainConfig.lambda_u, lambda_c: float = TrainConfig.lambda_c,
                 labeled_weight: float = TrainConfig.labeled_weight, drop_rate: float = TrainConfig.drop_rate,
                 decay: str = TrainConfig.decay, alpha_max: float = TrainConfig.alpha_max,
                 threshold: float = TrainConfig.threshold, hidden_channels: int = TrainConfig.hidden_channels,
                 num_blocks: int = TrainConfig.num_blocks, num_classes: Optional[int] = None,
                 random_state: int = 0):
        self.mode = mode
        self.aug_pool = aug_pool
        self.epochs = epochs
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.lambda_u = lambda_u
        self.lambda_c = lambda_c
        self.labeled_weight = labeled_weight
        self.drop_rate = drop_rate
        self.decay = decay
        self.alpha_max = alpha_max
        self.threshold = threshold
        self.hidden_channels = hidden_channels
        self.num_blocks = num_blocks
        self.num_classes = num_classes
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        keys = ("mode", "aug_pool", "epochs", "batch_labeled", "batch_unlabeled", "lr", "lr_schedule",
                "weight_decay", "momentum", "clip_norm", "lambda_u", "lambda_c", "labeled_weight", "drop_rate",
                "decay", "alpha_max", "threshold", "hidden_channels", "num_blocks")
        return TrainConfig(seed=int(self.random_state), save_checkpoints=False,
                           **{k: getattr(self, k) for k in keys})

    def fit(self, X, y, X_val=None, y_val=None) -> "DualTeacherSegmenter":
        """Train from scratch. Validation data only feeds the per-epoch log;
        without it the labeled images are scored instead."""
        config = self._config()
        X = check_images(X)
        y = check_masks(y, X, self.num_classes, allow_unlabeled=True)
        unl = unlabeled_rows(y)
        if not (~unl).any():
            raise ValueError("at least one labeled image is required")
        labeled = y[~unl]
        n_classes = self.num_classes or int(labeled[labeled != 255].max(initial=0)) + 1
        if n_classes < 2:
            raise ValueError("need at least two classes; pass num_classes explicitly")
        if X_val is None:
            X_val, y_val = X[~unl], labeled
        else:
            X_val = check_images(X_val, X.shape[1])
            y_val = check_masks(y_val, X_val, n_classes)
        data = TrainData(X[~unl], labeled, X[unl], X_val, y_val, n_classes)
        trainer = Trainer(config, data)
        self.log_ = trainer.run()
        self.params_ = trainer.student
        self.teachers_ = trainer.bank.teachers if trainer.bank is not None else []
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        self.n_channels_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities [N, C, H, W]."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_channels_in_)
        return softmax(predict_logits(self.params_, X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_channels_in_)
        return predict_logits(self.params_, X).argmax(axis=1)

    def score(self, X, y) -> float:
        """Mean IoU of the student on (X, y)."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_channels_in_)
        y = check_masks(y, X, self.n_classes_)
        return evaluate(self.params_, X, y, self.n_classes_)[0]
