"""Residual fully-convolutional segmentation network with droppable blocks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ParamSet, ShapeError, Tensor, add, conv2d, relu, scale


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    in_channels: int = 3
    hidden_channels: int = 16
    num_blocks: int = 4

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.hidden_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def header(self) -> dict[str, int]:
        return {
            "in_channels": self.in_channels,
            "hidden_channels": self.hidden_channels,
            "num_blocks": self.num_blocks,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_header(cls, values) -> "ModelConfig":
        cin, hidden, blocks, classes = (int(v) for v in values)
        return cls(num_classes=classes, in_channels=cin, hidden_channels=hidden, num_blocks=blocks)


def param_count(config: ModelConfig) -> int:
    h, c = config.hidden_channels, config.num_classes
    stem = h * config.in_channels * 9 + h
    block = h * h * 9 + h
    head = c * h * 9 + c
    return stem + config.num_blocks * block + head


# Residual branches and the head start small so activations do not grow with depth.
BLOCK_GAIN = 0.25
HEAD_GAIN = 0.1


def _conv_params(rng: np.random.Generator, cout: int, cin: int, gain: float = 1.0) -> tuple[Tensor, Tensor]:
    std = gain * np.sqrt(2.0 / (cin * 9))
    w = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)
    return Tensor(w), Tensor(np.zeros(cout, dtype=np.float32))


def init_model(config: ModelConfig, seed) -> ParamSet:
    """He-initialised weights (std sqrt(2 / fan_in)), scaled down in the
    residual branches and the head; zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    params["stem.w"], params["stem.b"] = _conv_params(rng, config.hidden_channels, config.in_channels)
    for l in range(config.num_blocks):
        params[f"block{l}.w"], params[f"block{l}.b"] = _conv_params(
            rng, config.hidden_channels, config.hidden_channels, BLOCK_GAIN)
    params["head.w"], params["head.b"] = _conv_params(rng, config.num_classes, config.hidden_channels, HEAD_GAIN)
    return params


# Pixel values in [0, 1] are centred and spread to roughly unit range before the
# stem; plain SGD converges far more slowly on uncentred inputs.
INPUT_SHIFT = 0.5
INPUT_SCALE = 4.0


def standardize(x: Tensor) -> Tensor:
    shift = Tensor(np.full_like(x.data, -INPUT_SHIFT))
    return scale(add(x, shift), INPUT_SCALE)


def num_blocks(params: ParamSet) -> int:
    return sum(1 for k in params if k.startswith("block") and k.endswith(".w"))


def block_param_names(l: int) -> tuple[str, str]:
    return f"block{l}.w", f"block{l}.b"


def forward(params: ParamSet, image, mask: Optional[Sequence[bool]] = None, track: bool = True) -> Tensor:
    """Logits [N, C, H, W].

    ``image`` holds pixel values in [0, 1] and is standardized internally.
    ``mask[l]`` False skips block ``l`` (identity). ``track=False`` evaluates
    without building a graph.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim != 4:
        raise ShapeError(f"image batch must be [N,C,H,W], got {x.shape}")
    p = params if track else {k: Tensor(v.data) for k, v in params.items()}
    n_blocks = num_blocks(params)
    if mask is not None and len(mask) != n_blocks:
        raise ShapeError(f"depth mask has {len(mask)} entries, model has {n_blocks} blocks")
    h = conv2d(standardize(x), p["stem.w"], p["stem.b"])
    for l in range(n_blocks):
        if mask is not None and not mask[l]:
            continue
        wk, bk = block_param_names(l)
        h = add(h, relu(conv2d(h, p[wk], p[bk])))
    return conv2d(h, p["head.w"], p["head.b"])


def predict_logits(params: ParamSet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = [forward(params, images[i:i + batch_size], track=False).data
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- stochastic depth

@dataclass(frozen=True)
class DecayRule:
    rate: float = 0.1
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("uniform", "linear"):
            raise ValueError(f"unknown decay kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("drop rate must lie in [0, 1)")

    def drop_probs(self, n_blocks: int) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(n_blocks, self.rate)
        return self.rate * np.arange(1, n_blocks + 1) / n_blocks


def sample_depth_mask(rule: DecayRule, n_blocks: int, rng: np.random.Generator) -> list[bool]:
    """Keep flags per block; block l is dropped with probability ``rule.drop_probs``[l]."""
    draws = rng.random(n_blocks)
    return [bool(keep) for keep in draws >= rule.drop_probs(n_blocks)]
