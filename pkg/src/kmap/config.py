"""Training configuration and the shipped hyperparameter presets."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional

LOSS_TERMS = ("cont", "rec", "ntxent", "perf", "type")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class TrainConfig:
    # embedding and state dimensions
    d_s: int = 32
    d_qk: int = 64
    d_lk: int = 32
    d_r: int = 32
    d_z: int = 32
    d_qb: int = 32
    d_lb: int = 32
    n_concepts: int = 8
    d_v: int = 32
    d_h: int = 32
    n_heads: int = 4
    attn_dim: int = 32
    init_std: float = 0.1
    memory_init_std: float = 0.1
    # optimisation
    lr: float = 0.1
    outer_lr: Optional[float] = None
    epochs: int = 10
    batch_size: int = 32
    T: int = 100
    k_train: int = 5
    k_eval: int = 99
    n_clusters: int = 3
    tau: float = 0.1
    clip_norm: float = 5.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss_weights: Dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in LOSS_TERMS})
    drop_frac: float = 0.1
    user_frac: float = 0.5
    train_frac: float = 0.8
    cutoff: int = 5
    profiling: bool = True
    freeze_concepts: bool = False
    concept_weights_path: Optional[str] = None
    seed: int = 0
    # data
    train_data: Optional[str] = None
    min_events: int = 1
    eval_every: int = 0

    def validate(self) -> "TrainConfig":
        ints = ["d_s", "d_qk", "d_lk", "d_r", "d_z", "d_qb", "d_lb", "n_concepts", "d_v", "d_h",
                "n_heads", "attn_dim", "batch_size", "k_train", "k_eval", "n_clusters", "cutoff", "min_events"]
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("lr", "tau", "init_std", "memory_init_std"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_qb != self.d_lb:
            raise ConfigError("d_qb must equal d_lb")
        if self.attn_dim % self.n_heads:
            raise ConfigError("n_heads must divide attn_dim")
        for name in ("drop_frac", "user_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.train_frac <= 1.0:
            raise ConfigError("train_frac must lie in (0, 1]")
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        self.loss_weights = {t: float(self.loss_weights.get(t, 1.0)) for t in LOSS_TERMS}
        self.betas = tuple(self.betas)
        return self

    @property
    def outer_learning_rate(self) -> float:
        return self.lr if self.outer_lr is None else self.outer_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        obj = dict(obj)
        preset = obj.pop("preset", None)
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        base = preset_config(preset).to_dict() if preset else {}
        base.update(obj)
        try:
            return cls(**base).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(obj)


PRESETS = {
    "ednet": dict(d_s=32, d_qk=64, d_lk=32, d_r=32, d_z=32, d_qb=32, d_lb=32, n_concepts=8, d_v=32,
                  lr=0.1, n_clusters=3, cutoff=5, tau=0.1, T=100, k_train=5, k_eval=99),
    "junyi": dict(d_s=32, d_qk=32, d_lk=32, d_r=32, d_z=32, d_qb=32, d_lb=32, n_concepts=8, d_v=32,
                  lr=0.01, n_clusters=3, cutoff=5, tau=0.1, T=100, k_train=5, k_eval=99),
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides}).validate()


def apply_env_seed(config: TrainConfig) -> TrainConfig:
    """``KMAP_SEED`` overrides the configured seed."""
    raw = os.environ.get("KMAP_SEED")
    if raw is not None:
        try:
            config.seed = int(raw)
        except ValueError:
            raise ConfigError(f"KMAP_SEED must be an integer, got {raw!r}") from None
    return config
