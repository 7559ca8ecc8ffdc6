"""Weak and strong (mixing) augmentations, plus the per-epoch pool sampler."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class AugKind(str, enum.Enum):
    CUTMIX = "cutmix"
    CLASSMIX = "classmix"
    MIXUP = "mixup"

    def __str__(self) -> str:
        return self.value


def parse_pool(names) -> tuple[AugKind, ...]:
    if isinstance(names, str):
        names = [n for n in names.replace("+", ",").split(",") if n.strip()]
    pool = tuple(AugKind(str(n).strip().lower()) for n in names)
    if not pool:
        raise ValueError("augmentation pool is empty")
    if len(set(pool)) != len(pool):
        raise ValueError(f"augmentation pool has duplicates: {[str(k) for k in pool]}")
    return pool


def sample_epoch_aug(pool: Sequence[AugKind], prev: Optional[AugKind], rng: np.random.Generator) -> AugKind:
    """Uniform draw from ``pool`` excluding the previous epoch's choice."""
    if not pool:
        raise ValueError("augmentation pool is empty")
    candidates = [k for k in pool if k != prev]
    if not candidates:
        raise ValueError(f"pool {[str(k) for k in pool]} cannot avoid repeating {prev}")
    return candidates[int(rng.integers(len(candidates)))]


# ---------------------------------------------------------------- weak

def apply_weak(image: np.ndarray, label: np.ndarray, flip: bool, dy: int, dx: int,
               ignore_label: int = 255) -> tuple[np.ndarray, np.ndarray]:
    """Optional horizontal flip, then translate by (dy, dx) with zero / ignore fill."""
    if flip:
        image = image[..., ::-1]
        label = label[..., ::-1]
    if dy or dx:
        h, w = label.shape
        out_img = np.zeros_like(image)
        out_lbl = np.full_like(label, ignore_label)
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out_img[:, yd, xd] = image[:, ys, xs]
        out_lbl[yd, xd] = label[ys, xs]
        return out_img, out_lbl
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def weak_augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator,
                 flip_prob: float = 0.5, max_shift: int = 4,
                 ignore_label: int = 255) -> tuple[np.ndarray, np.ndarray]:
    """Random flip plus pad-and-crop jitter of up to ``max_shift`` pixels.

    Padding fills the image with zeros and the label with ``ignore_label``.
    """
    flip = bool(rng.random() < flip_prob)
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    return apply_weak(image, label, flip, dy, dx, ignore_label)


def weak_augment_batch(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                       ignore_label: int = 255, **kw) -> tuple[np.ndarray, np.ndarray]:
    out = [weak_augment(img, lbl, rng, ignore_label=ignore_label, **kw) for img, lbl in zip(images, labels)]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])


# ---------------------------------------------------------------- strong

@dataclass
class MixedBatch:
    images: np.ndarray
    masks: np.ndarray                      # [N, H, W] uint8, 1 = donor pixel
    donors: np.ndarray                     # donor index per sample
    labels: Optional[np.ndarray] = None    # hard labels [N, H, W]
    soft_labels: Optional[np.ndarray] = None  # [N, C, H, W]
    lam: Optional[np.ndarray] = None       # CutMix area draw / MixUp weight


def donor_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation with fixed points re-rolled once, then sent to the next index."""
    if n < 2:
        raise ValueError("mixing needs a batch of at least 2")
    perm = rng.permutation(n)
    if np.any(perm == np.arange(n)):
        perm = rng.permutation(n)
    fixed = perm == np.arange(n)
    perm[fixed] = (np.arange(n)[fixed] + 1) % n
    return perm


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """(top, left, box_h, box_w) covering a 1 - lam fraction (floored per side)."""
    ratio = math.sqrt(1.0 - lam)
    bh, bw = int(math.floor(ratio * h)), int(math.floor(ratio * w))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
           lam: Optional[Sequence[float]] = None) -> MixedBatch:
    n, _, h, w = images.shape
    donors = donor_pairing(n, rng)
    lam = rng.random(n) if lam is None else np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
    masks = np.zeros((n, h, w), dtype=np.uint8)
    for i in range(n):
        top, left, bh, bw = cutmix_box(h, w, float(lam[i]), rng)
        masks[i, top:top + bh, left:left + bw] = 1
    return _paste(images, labels, donors, masks, lam)


def classmix(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
             ignore_label: int = 255) -> MixedBatch:
    """Paste ceil(k/2) of the k classes present in each donor's label map."""
    n = images.shape[0]
    donors = donor_pairing(n, rng)
    masks = np.zeros(labels.shape, dtype=np.uint8)
    for i in range(n):
        donor = labels[donors[i]]
        present = np.unique(donor)
        present = present[present != ignore_label]
        if present.size == 0:
            continue
        chosen = rng.choice(present, size=math.ceil(present.size / 2), replace=False)
        masks[i] = np.isin(donor, chosen)
    return _paste(images, labels, donors, masks, None)


def _paste(images, labels, donors, masks, lam) -> MixedBatch:
    m = masks.astype(bool)
    mixed_images = np.where(m[:, None], images[donors], images)
    mixed_labels = np.where(m, labels[donors], labels)
    return MixedBatch(images=mixed_images, masks=masks, donors=donors, labels=mixed_labels, lam=lam)


def mixup(images: np.ndarray, soft_labels: np.ndarray, rng: np.random.Generator,
          lam: Optional[Sequence[float]] = None) -> MixedBatch:
    """Convex combination lam * x_i + (1 - lam) * x_donor, labels alike; lam ~ U(0, 1)."""
    n, _, h, w = images.shape
    donors = donor_pairing(n, rng)
    lam = rng.random(n) if lam is None else np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
    lb = lam[:, None, None, None]
    mixed_images = (lb * images + (1.0 - lb) * images[donors]).astype(images.dtype)
    mixed_soft = lb * soft_labels + (1.0 - lb) * soft_labels[donors]
    return MixedBatch(images=mixed_images, masks=np.zeros((n, h, w), dtype=np.uint8), donors=donors,
                      soft_labels=mixed_soft, lam=lam)


def one_hot(labels: np.ndarray, num_classes: int, ignore_label: int = 255) -> np.ndarray:
    """[N, H, W] -> [N, C, H, W]; ignored pixels become all-zero columns."""
    valid = labels != ignore_label
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float64)
    idx = np.where(valid, labels, 0).astype(np.int64)
    np.put_along_axis(out, idx[:, None], 1.0, axis=1)
    return out * valid[:, None]


def strong_augment(kind: AugKind, images: np.ndarray, labels: np.ndarray, num_classes: int,
                   rng: np.random.Generator, ignore_label: int = 255) -> MixedBatch:
    if kind == AugKind.CUTMIX:
        return cutmix(images, labels, rng)
    if kind == AugKind.CLASSMIX:
        return classmix(images, labels, rng, ignore_label)
    if kind == AugKind.MIXUP:
        return mixup(images, one_hot(labels, num_classes, ignore_label), rng)
    raise ValueError(f"unknown augmentation {kind!r}")


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary (P5) graymap of a 0/1 or 0..255 map."""
    arr = np.asarray(mask)
    if arr.max(initial=0) <= 1:
        arr = arr * 255
    arr = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
