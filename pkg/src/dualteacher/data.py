"""Synthetic shape-segmentation data, label partitions and batch streams.

Each sample lives in its own ``.dtim`` file (little-endian)::

    b"DTIM" | u32 version | u16 H | u16 W | u8 C | f32 image[3, H, W] | u8 mask[H, W]
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

MAGIC = b"DTIM"
VERSION = 1
HEADER = struct.Struct("<4sIHHB")
SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring")
VAL_SIZE = 64
SPLITS = ("labeled", "unlabeled", "val")

PathLike = Union[str, Path]


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeGenConfig:
    n_samples: int = 256
    height: int = 64
    width: int = 64
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: float = 5.0
    max_size: float = 9.0
    noise: float = 0.05
    seed: int = 0
    n_val: int = VAL_SIZE

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("images must be at least 16x16")
        if not 2 <= self.num_classes <= len(SHAPE_KINDS) + 1:
            raise ValueError(f"num_classes must lie in [2, {len(SHAPE_KINDS) + 1}]")
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")

    @property
    def class_names(self) -> list[str]:
        return ["background", *SHAPE_KINDS[: self.num_classes - 1]]


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray   # [H, W] uint8


# ---------------------------------------------------------------- rendering

def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
                size: float) -> np.ndarray:
    # Shapes are axis-aligned: edge orientation alone then tells the classes apart
    # within the network's small receptive field.
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dx * dx + dy * dy <= size * size
    # circle, square and triangle of the same ``size`` cover the same area
    if kind == "square":
        half = size * math.sqrt(math.pi) / 2
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "triangle":
        r = size * math.sqrt(4 * math.pi / (3 * math.sqrt(3)))  # circumradius, apex up
        inside = np.ones_like(dx, dtype=bool)
        for k in range(3):
            a = -math.pi / 2 + 2 * math.pi * k / 3
            # outward normal of the edge opposite vertex k
            inside &= (-(math.cos(a) * dx + math.sin(a) * dy)) <= r / 2
        return inside
    if kind == "cross":
        arm = size * 0.35
        return ((np.abs(dx) <= size) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= size) & (np.abs(dx) <= arm))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= size * size) & (d2 >= (size * 0.55) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def render_sample(config: ShapeGenConfig, rng: np.random.Generator) -> Sample:
    """Bright random-colour shapes over a darker striped background, plus uniform noise."""
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.1, 0.35, size=3)
    # high-frequency stripes keep the background locally distinguishable from flat shapes
    freq = rng.uniform(0.8, 1.6, size=2) * rng.choice([-1.0, 1.0], size=2)
    phase = rng.uniform(0, 2 * math.pi, size=3)
    amp = rng.uniform(0.03, 0.1, size=3)
    wave = np.sin(freq[0] * xx[None] + freq[1] * yy[None] + phase[:, None, None])
    image = base[:, None, None] + amp[:, None, None] * wave
    mask = np.zeros((h, w), dtype=np.uint8)
    n_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, config.num_classes))
        size = rng.uniform(config.min_size, config.max_size)
        cy, cx = rng.uniform(size * 0.5, h - size * 0.5), rng.uniform(size * 0.5, w - size * 0.5)
        color = rng.uniform(0.55, 1.0, size=3)
        region = _shape_mask(SHAPE_KINDS[cls - 1], yy, xx, cy, cx, size)
        image[:, region] = color[:, None]
        mask[region] = cls
    image += rng.uniform(-config.noise, config.noise, size=image.shape)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), mask)


# ---------------------------------------------------------------- file format

def encode_sample(sample: Sample, num_classes: int) -> bytes:
    _, h, w = sample.image.shape
    return (HEADER.pack(MAGIC, VERSION, h, w, num_classes)
            + np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
            + np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())


def decode_sample(blob: bytes) -> tuple[Sample, int]:
    if len(blob) < HEADER.size:
        raise DataFormatError("file too short for a DTIM header")
    magic, version, h, w, c = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataFormatError("bad DTIM magic")
    if version != VERSION:
        raise DataFormatError(f"unsupported DTIM version {version}")
    n_img = 3 * h * w
    if len(blob) != HEADER.size + 4 * n_img + h * w:
        raise DataFormatError("DTIM payload length does not match header")
    image = np.frombuffer(blob, dtype="<f4", count=n_img, offset=HEADER.size).reshape(3, h, w)
    mask = np.frombuffer(blob, dtype=np.uint8, offset=HEADER.size + 4 * n_img).reshape(h, w)
    return Sample(image.astype(np.float32), mask.copy()), c


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    """Binary (P6) pixmap of a [3, H, W] image in [0, 1]."""
    arr = (np.clip(np.transpose(image, (1, 2, 0)), 0, 1) * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------- dataset

def _write_kv(path: Path, values: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


def _read_kv(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


class Dataset:
    """A generated dataset directory: ``dataset.txt``, ``train/*.dtim``, ``val/*.dtim``."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        meta = self.root / "dataset.txt"
        if not meta.exists():
            raise FileNotFoundError(f"no dataset.txt under {self.root}")
        raw = _read_kv(meta)
        kinds = {f.name: f.type for f in fields(ShapeGenConfig)}
        self.config = ShapeGenConfig(**{
            k: (float(v) if kinds[k] in (float, "float") else int(v)) for k, v in raw.items() if k in kinds})
        self.dataset_id = raw.get("dataset_id", "")
        self._cache: dict[str, Sample] = {}

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def train_ids(self) -> list[str]:
        return [f"train/{i:05d}" for i in range(self.config.n_samples)]

    @property
    def val_ids(self) -> list[str]:
        return [f"val/{i:05d}" for i in range(self.config.n_val)]

    def load(self, sample_id: str) -> Sample:
        if sample_id not in self._cache:
            path = self.root / f"{sample_id}.dtim"
            if not path.exists():
                raise KeyError(f"unknown sample id {sample_id!r}")
            sample, _ = decode_sample(path.read_bytes())
            self._cache[sample_id] = sample
        return self._cache[sample_id]

    def arrays(self, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        samples = [self.load(i) for i in ids]
        h, w = self.config.height, self.config.width
        if not samples:
            return np.zeros((0, 3, h, w), np.float32), np.zeros((0, h, w), np.uint8)
        return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def generate(config: ShapeGenConfig, out_dir: PathLike, fraction: float = 1 / 8,
             split_seed: Optional[int] = None) -> tuple[Dataset, "PartitionManifest"]:
    """Write the dataset plus a ``manifest.txt`` partition; deterministic per seed."""
    root = Path(out_dir)
    (root / "train").mkdir(parents=True, exist_ok=True)
    (root / "val").mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    for split, code, count in (("train", 0, config.n_samples), ("val", 1, config.n_val)):
        for i in range(count):
            rng = np.random.default_rng([config.seed, code, i])
            blob = encode_sample(render_sample(config, rng), config.num_classes)
            digest.update(blob)
            (root / split / f"{i:05d}.dtim").write_bytes(blob)
    _write_kv(root / "dataset.txt", {**asdict(config), "dataset_id": digest.hexdigest()[:16]})
    dataset = Dataset(root)
    manifest = partition(dataset, fraction, config.seed if split_seed is None else split_seed)
    manifest.write(root / "manifest.txt")
    return dataset, manifest


# ---------------------------------------------------------------- partitions

@dataclass
class PartitionManifest:
    dataset_id: str
    fraction: float
    seed: int
    labeled: list[str]
    unlabeled: list[str]
    val: list[str]

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    def to_text(self) -> str:
        lines = [f"dataset = {self.dataset_id}", f"fraction = {self.fraction!r}", f"seed = {self.seed}"]
        for split in SPLITS:
            lines.append(f"[{split}]")
            lines.extend(self.ids(split))
        return "\n".join(lines) + "\n"

    def write(self, path: PathLike) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path: PathLike) -> "PartitionManifest":
        header: dict[str, str] = {}
        sections: dict[str, list[str]] = {s: [] for s in SPLITS}
        current = None
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise DataFormatError(f"unknown manifest section {line}")
            elif current is None:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
            else:
                sections[current].append(line)
        return cls(header.get("dataset", ""), float(header.get("fraction", "nan")),
                   int(header.get("seed", "0")), sections["labeled"], sections["unlabeled"], sections["val"])


def partition(dataset: Dataset, fraction: float, seed: int) -> PartitionManifest:
    """Uniformly choose round(fraction * n) labeled training ids; the rest are unlabeled."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    ids = dataset.train_ids
    n_labeled = int(math.floor(fraction * len(ids) + 0.5))
    if n_labeled == 0:
        raise ValueError(f"fraction {fraction} of {len(ids)} samples labels nothing")
    rng = np.random.default_rng([seed, 101])
    chosen = set(rng.choice(len(ids), size=n_labeled, replace=False).tolist())
    labeled = [i for k, i in enumerate(ids) if k in chosen]
    unlabeled = [i for k, i in enumerate(ids) if k not in chosen]
    return PartitionManifest(dataset.dataset_id, fraction, seed, labeled, unlabeled, dataset.val_ids)


# ---------------------------------------------------------------- batches

def epoch_batches(ids: Sequence[str], batch_size: int, rng: np.random.Generator) -> list[list[str]]:
    """One shuffled pass without replacement; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(ids))
    return [[ids[k] for k in order[i:i + batch_size]] for i in range(0, len(ids), batch_size)]


def load_batch(dataset: Dataset, manifest: PartitionManifest, split: str, batch_size: int,
               rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Image/mask arrays for one epoch over ``split``."""
    for ids in epoch_batches(manifest.ids(split), batch_size, rng):
        yield dataset.arrays(ids)


def cycle_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless index batches over ``range(n)``, reshuffled every pass."""
    if n < 1:
        raise ValueError("cannot cycle over an empty split")
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]
