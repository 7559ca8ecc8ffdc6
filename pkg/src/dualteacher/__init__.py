"""Semi-supervised segmentation with alternating temporary EMA teachers.

A dependency-light numpy implementation: a small reverse-mode autodiff core,
a residual fully-convolutional network with droppable blocks, mixing
augmentations, the teacher bank, losses and metrics, a synthetic shape
dataset and the training engine behind the ``dualteacher`` command.
"""
from .augment import AugKind
from .config import TrainConfig, load_config
from .data import ShapeGenConfig, generate
from .engine import RunLog, Trainer, TrainData, evaluate, train
from .estimator import DualTeacherSegmenter
from .model import DecayRule, ModelConfig, forward, init_model
from .teachers import TeacherBank, alpha_at, ema_update

__version__ = "0.1.0"

__all__ = [
    "AugKind", "DecayRule", "DualTeacherSegmenter", "ModelConfig", "RunLog", "ShapeGenConfig",
    "TeacherBank", "TrainConfig", "TrainData", "Trainer", "alpha_at", "ema_update", "evaluate",
    "forward", "generate", "init_model", "load_config", "train",
]
