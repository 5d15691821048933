"""Configuration records: network shape, schedule, loss weights, run config.

JSON documents map onto these dataclasses; unknown keys are rejected so a
typo in a config file fails loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List

import numpy as np


class ConfigError(ValueError):
    """An invalid configuration; the message names the violated invariant."""


@dataclass
class NetworkConfig:
    levels: int = 4
    blocks_per_level: List[int] = field(default_factory=lambda: [2, 2, 2, 2])
    base_channels: int = 48
    windows: List[int] = field(default_factory=lambda: [16, 16, 8, 8])
    global_residual: bool = False
    dtype: str = "float32"
    # block internals
    n_state: int = 16
    expand: int = 1
    zero_block_init: bool = False
    use_global: bool = True
    use_regional: bool = True
    use_local: bool = True
    use_agb: bool = True
    use_rfb: bool = True

    def validate(self) -> "NetworkConfig":
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.blocks_per_level) != self.levels:
            raise ConfigError(
                f"len(blocks_per_level)={len(self.blocks_per_level)} != levels={self.levels}"
            )
        if len(self.windows) != self.levels:
            raise ConfigError(f"len(windows)={len(self.windows)} != levels={self.levels}")
        if self.base_channels % 2:
            raise ConfigError(f"base_channels must be even, got {self.base_channels}")
        if any(b < 1 for b in self.blocks_per_level):
            raise ConfigError(f"blocks_per_level entries must be >= 1: {self.blocks_per_level}")
        if any(w < 2 for w in self.windows):
            raise ConfigError(f"windows entries must be >= 2: {self.windows}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32|float64, got {self.dtype!r}")
        if not (self.use_global or self.use_regional or self.use_local):
            raise ConfigError("all mixing branches disabled; enable at least one")
        if self.n_state < 1 or self.expand < 1:
            raise ConfigError("n_state and expand must be >= 1")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class Schedule:
    """Flat warmup at lr_max, then cosine decay to lr_min, then flat lr_min.

    Defaults are the full-size spans (92k warm + 208k decay) at 1/100."""

    lr_max: float = 3e-4
    lr_min: float = 1e-6
    warm_iters: int = 920
    decay_iters: int = 2080

    @classmethod
    def scaled(cls, scale: float = 0.01, lr_max: float = 3e-4, lr_min: float = 1e-6):
        """Full-size spans (92k + 208k) multiplied by ``scale``."""
        return cls(lr_max=lr_max, lr_min=lr_min,
                   warm_iters=int(round(92_000 * scale)),
                   decay_iters=int(round(208_000 * scale)))

    def validate(self) -> "Schedule":
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must not exceed lr_max")
        if self.warm_iters < 0 or self.decay_iters < 1:
            raise ConfigError("warm_iters must be >= 0 and decay_iters >= 1")
        return self


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.05

    def validate(self) -> "LossWeights":
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        return self


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: Schedule = field(default_factory=Schedule)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    iters: int = 3000
    batch_size: int = 4
    patch: int = 64
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    data_manifest: str = ""
    out_dir: str = "runs/default"

    def validate(self) -> "TrainConfig":
        self.network.validate()
        self.schedule.validate()
        self.loss_weights.validate()
        if self.iters < 1 or self.batch_size < 1 or self.patch < 8:
            raise ConfigError("iters/batch_size must be >= 1 and patch >= 8")
        return self


def _from_dict(cls, d: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        ftype = fields[k].type
        if dataclasses.is_dataclass(_resolve(ftype)) and isinstance(v, dict):
            kwargs[k] = _from_dict(_resolve(ftype), v)
        else:
            kwargs[k] = v
    return cls(**kwargs)


_TYPEMAP = {}


def _resolve(t):
    if isinstance(t, str):
        return _TYPEMAP.get(t, t)
    return t


_TYPEMAP.update({
    "NetworkConfig": NetworkConfig,
    "Schedule": Schedule,
    "LossWeights": LossWeights,
})


def parse_train_config(text: str) -> TrainConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    return _from_dict(TrainConfig, doc).validate()


def load_train_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_train_config(f.read())


def dump_train_config(cfg: TrainConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=2)
