"""Training loop: temporary teachers, strong-augmentation pool, sub-model consistency."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .augment import AugKind, one_hot, sample_epoch_aug, strong_augment, weak_augment_batch, write_pgm
from .config import TrainConfig
from .data import Dataset, PartitionManifest, cycle_batches
from .model import ModelConfig, forward, init_model, num_blocks, predict_logits, sample_depth_mask
from .objectives import (
    IGNORE_LABEL,
    ConfusionMatrix,
    class_iou_divergence,
    cons_loss,
    miou,
    prediction_distance,
    sup_loss,
    total_loss,
    unsup_loss,
    window_stats,
)
from .teachers import TeacherBank, ensemble_probs
from .tensor import SGD, NonFiniteError, ParamSet, backward, softmax

logger = logging.getLogger(__name__)

# independent rng streams, keyed off the run seed
_INIT, _LABELED, _UNLABELED, _WEAK_L, _WEAK_U, _STRONG, _EPOCH_AUG, _DEPTH = range(8)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainData:
    labeled_images: np.ndarray
    labeled_masks: np.ndarray
    unlabeled_images: np.ndarray
    val_images: np.ndarray
    val_masks: np.ndarray
    num_classes: int
    dataset_id: str = ""

    @classmethod
    def from_disk(cls, data_dir, manifest_path=None) -> "TrainData":
        dataset = Dataset(data_dir)
        manifest = PartitionManifest.read(manifest_path or Path(data_dir) / "manifest.txt")
        if manifest.dataset_id and dataset.dataset_id and manifest.dataset_id != dataset.dataset_id:
            raise ValueError(f"manifest belongs to dataset {manifest.dataset_id}, not {dataset.dataset_id}")
        li, lm = dataset.arrays(manifest.labeled)
        ui, _ = dataset.arrays(manifest.unlabeled)
        vi, vm = dataset.arrays(manifest.val)
        return cls(li, lm, ui, vi, vm, dataset.num_classes, dataset.dataset_id)


@dataclass
class EpochStats:
    epoch: int
    l_sup: float
    l_unsup: float
    l_cons: float
    miou: float
    class_iou: list
    pred_dist: float
    active_teacher: int
    aug_kind: str


@dataclass
class RunLog:
    num_classes: int
    epochs: list = field(default_factory=list)

    @property
    def final_miou(self) -> float:
        return self.epochs[-1].miou if self.epochs else float("nan")

    @property
    def distances(self) -> list[float]:
        return [e.pred_dist for e in self.epochs]

    def distance_windows(self, width: int = 5):
        return window_stats(self.distances, width)

    def columns(self) -> list[str]:
        return (["epoch", "l_sup", "l_unsup", "l_cons", "miou"]
                + [f"iou_{c}" for c in range(self.num_classes)]
                + ["pred_dist", "active_teacher", "aug_kind"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for e in self.epochs:
            writer.writerow([e.epoch, _fmt(e.l_sup), _fmt(e.l_unsup), _fmt(e.l_cons), _fmt(e.miou)]
                            + [_fmt(v) for v in e.class_iou]
                            + [_fmt(e.pred_dist), e.active_teacher, e.aug_kind])
        return buf.getvalue()

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n_classes = sum(1 for k in (rows[0].keys() if rows else []) if k.startswith("iou_"))
        log = cls(n_classes)
        for r in rows:
            log.epochs.append(EpochStats(
                int(r["epoch"]), float(r["l_sup"]), float(r["l_unsup"]), float(r["l_cons"]), float(r["miou"]),
                [float(r[f"iou_{c}"]) for c in range(n_classes)], float(r["pred_dist"]),
                int(r["active_teacher"]), r["aug_kind"]))
        return log


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.8f}"


# ---------------------------------------------------------------- evaluation

def predict(params: ParamSet, images: np.ndarray) -> np.ndarray:
    return predict_logits(params, images).argmax(axis=1)


def evaluate(params: ParamSet, images: np.ndarray, masks: np.ndarray, num_classes: int) -> tuple[float, np.ndarray]:
    """Full-image inference over a split; returns (mIoU, per-class IoU)."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty split")
    cm = ConfusionMatrix(num_classes)
    for i in range(0, len(images), 16):
        cm.update(predict(params, images[i:i + 16]), masks[i:i + 16])
    ious, mean = miou(cm)
    return mean, ious


# ---------------------------------------------------------------- trainer

def _has_targets(labels: np.ndarray) -> bool:
    if labels.ndim == 4:  # soft targets; ignored pixels carry no mass
        return bool(np.any(labels.sum(axis=1) > 0))
    return bool(np.any(labels != IGNORE_LABEL))


class Trainer:
    """Owns the student, the teacher bank and every rng stream of one run."""

    def __init__(self, config: TrainConfig, data: TrainData, run_dir: Optional[Path] = None):
        self.config = config
        self.data = data
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.model_config = ModelConfig(num_classes=data.num_classes, in_channels=data.labeled_images.shape[1],
                                        hidden_channels=config.hidden_channels, num_blocks=config.num_blocks)
        if len(data.labeled_images) == 0:
            raise ValueError("no labeled samples")
        if config.mode != "supervised_only" and len(data.unlabeled_images) == 0:
            raise ValueError(f"mode {config.mode!r} needs unlabeled samples")
        seed = config.seed
        self.rngs = {k: np.random.default_rng([seed, k]) for k in range(8)}
        self.student = init_model(self.model_config, self.rngs[_INIT])
        self.optimizer = SGD(self.student, config.lr, config.weight_decay, config.momentum,
                             config.clip_norm or None)
        self.bank = (TeacherBank(self.student, config.n_teachers, config.policy, config.alpha_max)
                     if config.n_teachers else None)
        self.weights = config.loss_weights
        self.rule = config.decay_rule
        self.log = RunLog(data.num_classes)
        self._labeled_stream = cycle_batches(len(data.labeled_images), config.batch_labeled, self.rngs[_LABELED])
        self._prev_aug: Optional[AugKind] = None
        self.diag_images = data.val_images[: config.diag_size]
        self.global_step = 0

    @property
    def steps_per_epoch(self) -> int:
        """One pass over the unlabeled split (the labeled one when nothing is unlabeled)."""
        n = len(self.data.unlabeled_images) or len(self.data.labeled_images)
        return math.ceil(n / self.config.batch_unlabeled)

    # -- schedule

    @property
    def semi_supervised(self) -> bool:
        return self.bank is not None

    def teacher_for(self, epoch: int) -> int:
        """Teacher that receives EMA updates in ``epoch`` (and labels, under round robin)."""
        return epoch % len(self.bank) if self.bank else -1

    def next_aug(self) -> Optional[AugKind]:
        if not self.semi_supervised:
            return None
        pool = self.config.aug_pool
        prev = self._prev_aug if len(pool) > 1 else None
        aug = sample_epoch_aug(pool, prev, self.rngs[_EPOCH_AUG])
        self._prev_aug = aug
        return aug

    # -- one step

    def _pseudo_labels(self, images: np.ndarray, valid: np.ndarray, epoch: int) -> np.ndarray:
        labels, _ = self.bank.pseudo_label(images, epoch, self.config.threshold or None)
        return np.where(valid, labels, IGNORE_LABEL)

    def train_step(self, labeled: tuple[np.ndarray, np.ndarray], unlabeled: Optional[np.ndarray],
                   epoch: int, aug: Optional[AugKind]) -> dict[str, float]:
        """One optimisation step; returns the three loss values."""
        cfg, C = self.config, self.data.num_classes
        self.student.zero_grad()
        unsup = cons = None
        if self.semi_supervised:
            # (1) weak view of the unlabeled batch; padding is tracked through a dummy label map
            blank = np.zeros((len(unlabeled),) + unlabeled.shape[2:], dtype=np.int64)
            xu_weak, pad = weak_augment_batch(unlabeled, blank, self.rngs[_WEAK_U])
            # (2) pseudo-labels from the epoch's teacher(s)
            yu = self._pseudo_labels(xu_weak, pad != IGNORE_LABEL, epoch)
            # (3) strong mixing applied to images and pseudo-labels together
            if len(xu_weak) >= 2:
                mixed = strong_augment(aug, xu_weak, yu, C, self.rngs[_STRONG])
                strong_x = mixed.images
                strong_y = mixed.soft_labels if aug == AugKind.MIXUP else mixed.labels
            else:
                strong_x, strong_y = xu_weak, (one_hot(yu, C) if aug == AugKind.MIXUP else yu)
            # (4) student on the strong view; a fully thresholded-away batch contributes nothing
            if _has_targets(strong_y):
                unsup = unsup_loss(forward(self.student, strong_x), strong_y)
        # (5) student on the weak labeled view
        xl, yl = weak_augment_batch(labeled[0], labeled[1].astype(np.int64), self.rngs[_WEAK_L])
        sup = sup_loss(forward(self.student, xl), yl)
        if self.semi_supervised:
            # (6) sampled sub-model on the same weak view, teacher labels as targets
            mask = sample_depth_mask(self.rule, self.model_config.num_blocks, self.rngs[_DEPTH])
            cons_x, cons_y = xu_weak, yu
            if cfg.cons_scope == "both":
                yl_t = self._pseudo_labels(xl, yl != IGNORE_LABEL, epoch)
                cons_x, cons_y = np.concatenate([xu_weak, xl]), np.concatenate([yu, yl_t])
            if _has_targets(cons_y):
                cons = cons_loss(forward(self.student, cons_x, mask), cons_y)
        # (7) one backward over the weighted sum, one SGD step
        loss = total_loss(sup, unsup, cons, self.weights)
        absent = 0.0 if self.semi_supervised else float("nan")
        values = {"sup": sup.item(), "unsup": unsup.item() if unsup is not None else absent,
                  "cons": cons.item() if cons is not None else absent}
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {values}")
        backward(loss, params=self.student)
        self.optimizer.step()
        # (8) EMA into the teacher that owns this epoch
        if self.semi_supervised:
            self.bank.update(self.teacher_for(epoch), self.student)
        return values

    # -- epochs

    def measure_distance(self, epoch: int) -> float:
        """MSE between the supervising teacher(s) and the student on the diagnostic batch."""
        if not self.semi_supervised or len(self.diag_images) == 0:
            return float("nan")
        teacher = self.bank.probs(self.diag_images, epoch)
        student = softmax(predict_logits(self.student, self.diag_images))
        return prediction_distance(teacher, student)

    def run_epoch(self, epoch: int) -> EpochStats:
        cfg = self.config
        aug = self.next_aug()
        dist = self.measure_distance(epoch)
        n_steps_src = len(self.data.unlabeled_images) or len(self.data.labeled_images)
        order = self.rngs[_UNLABELED].permutation(n_steps_src)
        total_steps = cfg.epochs * self.steps_per_epoch
        sums = {"sup": [], "unsup": [], "cons": []}
        for start in range(0, n_steps_src, cfg.batch_unlabeled):
            li = next(self._labeled_stream)
            labeled = (self.data.labeled_images[li], self.data.labeled_masks[li])
            unlabeled = self.data.unlabeled_images[order[start:start + cfg.batch_unlabeled]] \
                if self.semi_supervised else None
            self.optimizer.lr = cfg.lr_at(self.global_step, total_steps)
            self.global_step += 1
            try:
                values = self.train_step(labeled, unlabeled, epoch, aug)
            except (TrainingDiverged, NonFiniteError) as exc:
                self._dump_divergence(epoch, labeled, unlabeled)
                raise TrainingDiverged(str(exc)) from exc
            for k, v in values.items():
                sums[k].append(v)
        m, ious = evaluate(self.student, self.data.val_images, self.data.val_masks, self.data.num_classes)
        stats = EpochStats(epoch, _mean(sums["sup"]), _mean(sums["unsup"]), _mean(sums["cons"]), m,
                           [float(v) for v in ious], dist, self.teacher_for(epoch), str(aug) if aug else "none")
        self.log.epochs.append(stats)
        logger.info("epoch %d  sup %.4f unsup %.4f cons %.4f  mIoU %.4f  dist %.5f  teacher %d  aug %s",
                    epoch, stats.l_sup, stats.l_unsup, stats.l_cons, m, dist, stats.active_teacher, stats.aug_kind)
        if self.run_dir is not None:
            (self.run_dir / "runlog.csv").write_text(self.log.to_csv())
            if cfg.save_checkpoints:
                self.save_checkpoints(f"e{epoch:03d}")
        return stats

    def run(self) -> RunLog:
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.txt").write_text(self.config.to_text())
            (self.run_dir / "runlog.csv").write_text(self.log.to_csv())
            if self.config.save_checkpoints:
                self.save_checkpoints("init")
        for epoch in range(self.config.epochs):
            self.run_epoch(epoch)
        return self.log

    def save_checkpoints(self, tag: str) -> None:
        ckpt_dir = self.run_dir / "checkpoints"
        header = self.model_config.header()
        checkpoint.save(ckpt_dir / f"student_{tag}.dtck", self.student, header)
        if self.bank is not None:
            for k, t in enumerate(self.bank.teachers):
                checkpoint.save(ckpt_dir / f"teacher{k}_{tag}.dtck", t, header)

    def _dump_divergence(self, epoch, labeled, unlabeled) -> None:
        if self.run_dir is None:
            return
        dump = self.run_dir / "nan_dump"
        dump.mkdir(parents=True, exist_ok=True)
        checkpoint.save(dump / f"student_e{epoch:03d}.dtck", self.student, self.model_config.header())
        arrays = {"labeled_images": labeled[0], "labeled_masks": labeled[1]}
        if unlabeled is not None:
            arrays["unlabeled_images"] = unlabeled
        np.savez(dump / "batch.npz", **arrays)


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values and not any(math.isnan(v) for v in values) else float("nan")


def train(config: TrainConfig, data: Optional[TrainData] = None) -> RunLog:
    """Run ``config`` end to end, writing ``runlog.csv`` and checkpoints under ``config.run_dir``."""
    if data is None:
        data = TrainData.from_disk(config.data_dir, config.manifest_path)
    return Trainer(config, data, Path(config.run_dir)).run()


# ---------------------------------------------------------------- diagnostics

def load_run_config(run_dir) -> TrainConfig:
    from .config import load_config
    return load_config(str(Path(run_dir) / "config.txt"), environ={})


def load_params(path) -> tuple[ParamSet, Optional[ModelConfig]]:
    params, header = checkpoint.load(path)
    return params, (ModelConfig.from_header(header) if header is not None else None)


def diagnose(run_dir, epoch: Optional[int] = None, width: int = 5, k: int = 5,
             reference: str = "active", dump_masks: bool = False, data: Optional[TrainData] = None) -> dict:
    """Windowed prediction-distance summary and teacher class-IoU divergence.

    ``reference='active'`` uses the distances logged during training (against
    the teacher supervising each epoch); ``'mean'`` recomputes them from
    checkpoints against the equal-weight average of all teachers.
    """
    run_dir = Path(run_dir)
    log_path = run_dir / "runlog.csv"
    if not log_path.exists():
        raise FileNotFoundError(f"no runlog.csv in {run_dir}")
    log = RunLog.read_csv(log_path)
    cfg = load_run_config(run_dir)
    out_dir = run_dir / "diagnostics"
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "checkpoints"
    n_teachers = cfg.n_teachers
    report: dict = {"n_teachers": n_teachers}

    if reference == "active":
        distances = log.distances
    elif reference == "mean":
        if data is None:
            data = TrainData.from_disk(cfg.data_dir, cfg.manifest_path)
        diag = data.val_images[: cfg.diag_size]
        distances = []
        for e in range(len(log.epochs)):
            tag = "init" if e == 0 else f"e{e - 1:03d}"
            student = _require(ckpt / f"student_{tag}.dtck")
            teachers = [_require(ckpt / f"teacher{t}_{tag}.dtck") for t in range(n_teachers)]
            probs = ensemble_probs([predict_logits(t, diag) for t in teachers])
            distances.append(prediction_distance(probs, softmax(predict_logits(student, diag))))
    else:
        raise ValueError(f"unknown distance reference {reference!r}")
    windows = window_stats(distances, width) if distances else []
    report["distance_windows"] = windows
    with open(out_dir / "distance_windows.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epochs", "avg", "std"])
        for first, last, avg, std in windows:
            w.writerow([f"{first}-{last}", f"{avg:.6f}", f"{std:.6f}"])

    if n_teachers >= 2 and log.epochs:
        e = len(log.epochs) - 1 if epoch is None else epoch
        if data is None:
            data = TrainData.from_disk(cfg.data_dir, cfg.manifest_path)
        ta = _require(ckpt / f"teacher0_e{e:03d}.dtck")
        tb = _require(ckpt / f"teacher1_e{e:03d}.dtck")
        miou_a, iou_a = evaluate(ta, data.val_images, data.val_masks, data.num_classes)
        miou_b, iou_b = evaluate(tb, data.val_images, data.val_masks, data.num_classes)
        rows = class_iou_divergence(iou_a, iou_b, k)
        report["divergence"] = rows
        report["teacher_miou"] = (miou_a, miou_b)
        with open(out_dir / "class_divergence.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "iou_teacher0", "iou_teacher1", "delta"])
            for cls, a, b, d in rows:
                w.writerow([cls, f"{a:.6f}", f"{b:.6f}", f"{d:.6f}"])

    if dump_masks:
        if data is None:
            data = TrainData.from_disk(cfg.data_dir, cfg.manifest_path)
        rng = np.random.default_rng([cfg.seed, 99])
        imgs = data.labeled_images[:4]
        lbls = data.labeled_masks[:4].astype(np.int64)
        if len(imgs) >= 2:
            for kind in (AugKind.CUTMIX, AugKind.CLASSMIX):
                mixed = strong_augment(kind, imgs, lbls, data.num_classes, rng)
                for i, m in enumerate(mixed.masks):
                    write_pgm(out_dir / f"mask_{kind}_{i}.pgm", m)
    return report


def _require(path: Path) -> ParamSet:
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return checkpoint.load(path)[0]


def compare(configs: Sequence[TrainConfig], seeds: Sequence[int] = (0, 1, 2), root=None,
            data: Optional[TrainData] = None) -> list[dict]:
    """Run every config over ``seeds``; one row per config with mean/std final mIoU."""
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    sources = {(str(Path(c.data_dir).resolve()), str(c.manifest_path.resolve())) for c in configs}
    if data is None and len(sources) > 1:
        raise ValueError("configs do not share one dataset and manifest")
    if len(seeds) == 1:
        warnings.warn("a single seed gives no spread; std reported as 0", stacklevel=2)
    if data is None:
        d, m = next(iter(sources))
        data = TrainData.from_disk(d, m)
    rows = []
    for cfg in configs:
        scores = []
        for seed in seeds:
            name = f"{cfg.mode}_aug{len(cfg.aug_pool)}_s{seed}"
            run_cfg = replace(cfg, seed=seed, run_dir=str(Path(root) / name) if root else cfg.run_dir)
            if root is None:
                log = Trainer(run_cfg, data).run()
            else:
                log = Trainer(run_cfg, data, Path(run_cfg.run_dir)).run()
            scores.append(log.final_miou)
        rows.append({
            "mode": cfg.mode,
            "n_aug": len(cfg.aug_pool),
            "pool": "+".join(str(a) for a in cfg.aug_pool),
            "mean": float(np.mean(scores)),
            "std": float(np.std(scores)) if len(scores) > 1 else 0.0,
            "scores": scores,
        })
    return rows


def format_grid(rows: list[dict]) -> str:
    """Modes as columns, augmentation-pool sizes as rows, cells 'mean±std' in mIoU points."""
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    augs = sorted({r["n_aug"] for r in rows})
    cell = {(r["mode"], r["n_aug"]): f"{100 * r['mean']:.2f}±{100 * r['std']:.2f}" for r in rows}
    lines = ["method," + ",".join(modes)]
    for a in augs:
        lines.append(f"Aug×{a}," + ",".join(cell.get((m, a), "") for m in modes))
    return "\n".join(lines) + "\n"
