"""Training configuration and its ``key = value`` text form."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from .augment import AugKind, parse_pool
from .model import DecayRule
from .objectives import LossWeights

MODES = {"supervised_only": 0, "single": 1, "dual": 2, "triple": 3, "ensemble": 2}
SEED_ENV = "DUALTEACH_SEED"
LR_SCHEDULES = ("poly", "constant")
POLY_POWER = 0.9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "dual"
    aug_pool: tuple = (AugKind.CLASSMIX, AugKind.CUTMIX)
    epochs: int = 30
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    lr: float = 0.2
    lr_schedule: str = "poly"
    weight_decay: float = 1e-4
    momentum: float = 0.0
    clip_norm: float = 2.0
    lambda_u: float = 1.0
    lambda_c: float = 1.0
    labeled_weight: float = 2.0
    drop_rate: float = 0.2
    decay: str = "uniform"
    alpha_max: float = 0.8
    cons_scope: str = "unlabeled"
    threshold: float = 0.0
    hidden_channels: int = 16
    num_blocks: int = 4
    diag_size: int = 64
    seed: int = 0
    data_dir: str = "data"
    manifest: str = ""
    run_dir: str = "runs/default"
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        object.__setattr__(self, "aug_pool", parse_pool(self.aug_pool))
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")
        if self.cons_scope not in ("unlabeled", "both"):
            raise ConfigError("cons_scope must be 'unlabeled' or 'both'")
        self.decay_rule  # validates decay/drop_rate
        self.loss_weights

    @property
    def n_teachers(self) -> int:
        return MODES[self.mode]

    @property
    def policy(self) -> str:
        return "ensemble" if self.mode == "ensemble" else "round_robin"

    @property
    def decay_rule(self) -> DecayRule:
        return DecayRule(self.drop_rate, self.decay)

    @property
    def loss_weights(self) -> LossWeights:
        if self.mode == "supervised_only":
            return LossWeights(0.0, 0.0, self.labeled_weight)
        return LossWeights(self.lambda_u, self.lambda_c, self.labeled_weight)

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for optimisation step ``step`` of ``total_steps``."""
        if self.lr_schedule == "constant" or total_steps <= 0:
            return self.lr
        return self.lr * (1.0 - min(step, total_steps) / total_steps) ** POLY_POWER

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data_dir) / "manifest.txt"

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **coerce(kw))

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            if k == "aug_pool":
                v = ",".join(str(a) for a in self.aug_pool)
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"


def _coerce_value(name: str, raw: Any) -> Any:
    types = {f.name: f.type for f in fields(TrainConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    if not isinstance(raw, str):
        return raw
    kind = types[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def coerce(values: Mapping[str, Any]) -> dict[str, Any]:
    return {k: _coerce_value(k, v) for k, v in values.items()}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> TrainConfig:
    """Defaults < config file < ``DUALTEACH_SEED`` < explicit overrides."""
    values: dict[str, Any] = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        values["seed"] = env[SEED_ENV]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**coerce(values))
